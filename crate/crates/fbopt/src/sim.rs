//! Closed-loop integration of the plant/controller interconnection: exact
//! zero-order-hold plant steps interleaved with explicit Euler controller
//! updates, scenario-driven loads and events, trajectory recording, and
//! gain-sweep experiments.

use std::fmt;
use std::io;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::controller::{
    build_certificate, certificate_from_lyapunov, GradientController, StabilityCertificate,
};
use crate::monitor::{evaluate_lasalle, LaSalleState};
use crate::objective::{lipschitz_bound_analytic, Objective, ObjectiveError};
use crate::oracle::{self, OracleError, OracleSettings};
use crate::plant::{DiscretizedPlant, LtiPlant, PlantError, SteadyStateMap};
use crate::powergrid::{self, GridCase, GridEvent};

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    BadScenario(String),
    Grid(powergrid::GridError),
    Plant(PlantError),
    Objective(ObjectiveError),
    Oracle(OracleError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::BadScenario(msg) => write!(f, "bad scenario: {msg}"),
            SimError::Grid(e) => write!(f, "{e}"),
            SimError::Plant(e) => write!(f, "{e}"),
            SimError::Objective(e) => write!(f, "{e}"),
            SimError::Oracle(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<powergrid::GridError> for SimError {
    fn from(e: powergrid::GridError) -> Self {
        SimError::Grid(e)
    }
}

impl From<PlantError> for SimError {
    fn from(e: PlantError) -> Self {
        SimError::Plant(e)
    }
}

impl From<ObjectiveError> for SimError {
    fn from(e: ObjectiveError) -> Self {
        SimError::Objective(e)
    }
}

impl From<OracleError> for SimError {
    fn from(e: OracleError) -> Self {
        SimError::Oracle(e)
    }
}

/// How the controller gain is chosen relative to the certified bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonPolicy {
    FractionOfStar(f64),
    Absolute(f64),
}

impl EpsilonPolicy {
    pub fn resolve(&self, epsilon_star: f64) -> f64 {
        match *self {
            EpsilonPolicy::FractionOfStar(f) => f * epsilon_star,
            EpsilonPolicy::Absolute(e) => e,
        }
    }
}

/// One piece of the load profile. The segment runs from `start` to the next
/// segment's start (or the scenario end); `end_values`, when present, turns
/// the piece into a linear ramp sampled-and-held at step boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSegment {
    pub start: f64,
    pub values: DVector<f64>,
    pub end_values: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    pub time: f64,
    pub event: GridEvent,
}

/// A full experiment description: horizon, integration step, gain policy,
/// load profile, events, and reproducibility knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub duration: f64,
    pub step: f64,
    pub seed: u64,
    pub epsilon: EpsilonPolicy,
    pub loads: Vec<LoadSegment>,
    pub events: Vec<TimedEvent>,
    pub model_update_on_event: bool,
    pub record_every: usize,
    pub initial_u: Option<DVector<f64>>,
    pub initial_x: Option<DVector<f64>>,
    pub divergence_guard: f64,
    pub residual_tol: f64,
}

pub const DEFAULT_STEP: f64 = 0.01;
pub const DEFAULT_DIVERGENCE_GUARD: f64 = 1e6;
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-5;

impl Scenario {
    /// Constant-load scenario with no events.
    pub fn constant(duration: f64, step: f64, epsilon: EpsilonPolicy) -> Self {
        Scenario {
            duration,
            step,
            seed: 0,
            epsilon,
            loads: Vec::new(),
            events: Vec::new(),
            model_update_on_event: false,
            record_every: 1,
            initial_u: None,
            initial_x: None,
            divergence_guard: DEFAULT_DIVERGENCE_GUARD,
            residual_tol: DEFAULT_RESIDUAL_TOL,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| SimError::BadScenario(e.to_string()))?;
        file.into_scenario()
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            SimError::BadScenario(format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::BadScenario("duration_s must be positive".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(SimError::BadScenario("step_s must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(SimError::BadScenario("record_every must be at least 1".into()));
        }
        match self.epsilon {
            EpsilonPolicy::FractionOfStar(f) if !(f > 0.0 && f.is_finite()) => {
                return Err(SimError::BadScenario(
                    "epsilon.fraction_of_star must be positive".into(),
                ));
            }
            EpsilonPolicy::Absolute(e) if !(e > 0.0 && e.is_finite()) => {
                return Err(SimError::BadScenario("epsilon.absolute must be positive".into()));
            }
            _ => {}
        }
        for (i, seg) in self.loads.iter().enumerate() {
            if i == 0 && seg.start != 0.0 {
                return Err(SimError::BadScenario(
                    "the first load segment must start at 0".into(),
                ));
            }
            if i > 0 && seg.start <= self.loads[i - 1].start {
                return Err(SimError::BadScenario(
                    "load segments must have strictly increasing start times".into(),
                ));
            }
            if seg.start >= self.duration && i > 0 {
                return Err(SimError::BadScenario(format!(
                    "load segment {i} starts after the scenario ends"
                )));
            }
            if let Some(end) = &seg.end_values {
                if end.len() != seg.values.len() {
                    return Err(SimError::BadScenario(format!(
                        "load segment {i}: end_values length differs from values"
                    )));
                }
            }
        }
        for ev in &self.events {
            if !(0.0..=self.duration).contains(&ev.time) {
                return Err(SimError::BadScenario(format!(
                    "event at t = {} is outside [0, {}]",
                    ev.time, self.duration
                )));
            }
        }
        let mut sorted = self.events.windows(2);
        if sorted.any(|w| w[0].time > w[1].time) {
            return Err(SimError::BadScenario("events must be time-ordered".into()));
        }
        Ok(())
    }

    /// Index of the segment active at time `t`, if any.
    fn segment_index(&self, t: f64) -> Option<usize> {
        if self.loads.is_empty() {
            return None;
        }
        let mut idx = 0;
        for (i, seg) in self.loads.iter().enumerate() {
            if seg.start <= t {
                idx = i;
            } else {
                break;
            }
        }
        Some(idx)
    }

    /// Disturbance value at time `t` (sampled-and-held by the caller).
    pub fn load_at(&self, t: f64, default_w: &DVector<f64>) -> DVector<f64> {
        match self.segment_index(t) {
            None => default_w.clone(),
            Some(i) => {
                let seg = &self.loads[i];
                match &seg.end_values {
                    None => seg.values.clone(),
                    Some(end) => {
                        let seg_end = self
                            .loads
                            .get(i + 1)
                            .map(|s| s.start)
                            .unwrap_or(self.duration);
                        let span = (seg_end - seg.start).max(f64::MIN_POSITIVE);
                        let alpha = ((t - seg.start) / span).clamp(0.0, 1.0);
                        &seg.values * (1.0 - alpha) + end * alpha
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario file (TOML) representation
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct EpsilonSpec {
    fraction_of_star: Option<f64>,
    absolute: Option<f64>,
}

#[derive(Deserialize)]
struct LoadSegmentSpec {
    start_s: f64,
    values: Vec<f64>,
    end_values: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct EventSpec {
    time_s: f64,
    #[serde(flatten)]
    event: GridEvent,
}

#[derive(Deserialize)]
struct ScenarioFile {
    duration_s: f64,
    step_s: Option<f64>,
    seed: Option<u64>,
    model_update_on_event: Option<bool>,
    record_every: Option<usize>,
    epsilon: Option<EpsilonSpec>,
    #[serde(default)]
    loads: Vec<LoadSegmentSpec>,
    #[serde(default)]
    events: Vec<EventSpec>,
    initial_u: Option<Vec<f64>>,
    initial_x: Option<Vec<f64>>,
    divergence_guard: Option<f64>,
    residual_tol: Option<f64>,
}

impl ScenarioFile {
    fn into_scenario(self) -> Result<Scenario, SimError> {
        let epsilon = match self.epsilon {
            // Half the certified bound when the scenario does not say.
            None => EpsilonPolicy::FractionOfStar(0.5),
            Some(spec) => match (spec.fraction_of_star, spec.absolute) {
                (Some(f), None) => EpsilonPolicy::FractionOfStar(f),
                (None, Some(e)) => EpsilonPolicy::Absolute(e),
                _ => {
                    return Err(SimError::BadScenario(
                        "epsilon must set exactly one of fraction_of_star or absolute".into(),
                    ))
                }
            },
        };
        let scenario = Scenario {
            duration: self.duration_s,
            step: self.step_s.unwrap_or(DEFAULT_STEP),
            seed: self.seed.unwrap_or(0),
            epsilon,
            loads: self
                .loads
                .into_iter()
                .map(|seg| LoadSegment {
                    start: seg.start_s,
                    values: DVector::from_column_slice(&seg.values),
                    end_values: seg.end_values.map(|v| DVector::from_column_slice(&v)),
                })
                .collect(),
            events: self
                .events
                .into_iter()
                .map(|ev| TimedEvent {
                    time: ev.time_s,
                    event: ev.event,
                })
                .collect(),
            model_update_on_event: self.model_update_on_event.unwrap_or(false),
            record_every: self.record_every.unwrap_or(1),
            initial_u: self.initial_u.map(|v| DVector::from_column_slice(&v)),
            initial_x: self.initial_x.map(|v| DVector::from_column_slice(&v)),
            divergence_guard: self.divergence_guard.unwrap_or(DEFAULT_DIVERGENCE_GUARD),
            residual_tol: self.residual_tol.unwrap_or(DEFAULT_RESIDUAL_TOL),
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct GridContext {
    case: GridCase,
    plant: powergrid::GridPlant,
}

/// Plant, certificate, objective and controller wired together and ready to
/// run. For grid cases the plant is the reduced one.
#[derive(Clone)]
pub struct ClosedLoop {
    pub plant: LtiPlant,
    pub ssm: SteadyStateMap,
    pub certificate: StabilityCertificate,
    pub objective: Arc<dyn Objective>,
    pub controller: GradientController,
    pub default_w: DVector<f64>,
    pub default_u: DVector<f64>,
    grid: Option<GridContext>,
}

impl ClosedLoop {
    /// Wire up a generic LTI plant with a caller-supplied objective and its
    /// Lipschitz constant.
    pub fn for_lti(
        plant: LtiPlant,
        objective: Arc<dyn Objective>,
        ell: f64,
        epsilon: EpsilonPolicy,
    ) -> Result<Self, SimError> {
        let ssm = SteadyStateMap::new(&plant)?;
        let certificate = build_certificate(&plant, &ssm, ell)?;
        let eps = epsilon.resolve(certificate.epsilon_star());
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(SimError::BadScenario(format!(
                "resolved controller gain must be positive, got {eps}"
            )));
        }
        let controller = GradientController::new(eps, ssm.clone(), objective.clone());
        let default_w = DVector::zeros(plant.disturbance_dim());
        let default_u = DVector::zeros(plant.input_dim());
        Ok(ClosedLoop {
            plant,
            ssm,
            certificate,
            objective,
            controller,
            default_w,
            default_u,
            grid: None,
        })
    }

    /// Assemble a grid case: reduced plant, soft-constrained objective,
    /// analytic Lipschitz constant, certificate, controller.
    pub fn for_grid(case: &GridCase, epsilon: EpsilonPolicy) -> Result<Self, SimError> {
        let grid_plant = powergrid::assemble_plant(case)?;
        let ssm = SteadyStateMap::new(&grid_plant.reduced)?;
        let objective = Arc::new(powergrid::penalty_objective(case, &grid_plant)?);
        let ell = lipschitz_bound_analytic(&objective, &ssm)?;
        let certificate = certificate_from_lyapunov(
            grid_plant.lyapunov_p.clone(),
            grid_plant.lyapunov_min_eig,
            &ssm,
            ell,
        )?;
        let eps = epsilon.resolve(certificate.epsilon_star());
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(SimError::BadScenario(format!(
                "resolved controller gain must be positive, got {eps}"
            )));
        }
        let controller = GradientController::new(eps, ssm.clone(), objective.clone());
        let loads = case.loads();
        Ok(ClosedLoop {
            plant: grid_plant.reduced.clone(),
            ssm,
            certificate,
            objective: objective as Arc<dyn Objective>,
            controller,
            default_w: loads.clone(),
            default_u: loads,
            grid: Some(GridContext {
                case: case.clone(),
                plant: grid_plant,
            }),
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.controller.epsilon()
    }

    pub fn grid_case(&self) -> Option<&GridCase> {
        self.grid.as_ref().map(|ctx| &ctx.case)
    }

    /// Same loop with the gain replaced by `multiplier * epsilon_star`.
    pub fn with_epsilon_multiplier(&self, multiplier: f64) -> Self {
        let mut clone = self.clone();
        clone
            .controller
            .set_epsilon(multiplier * self.certificate.epsilon_star());
        clone
    }
}

// ---------------------------------------------------------------------------
// Trajectory record
// ---------------------------------------------------------------------------

/// Sampled time series of the closed loop plus diagnostic channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: f64,
    pub record_every: usize,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    /// `Phi(x, u)` per sample.
    pub cost: Vec<f64>,
    /// Oracle optimal cost, held between load boundaries and events.
    pub reference_cost: Vec<f64>,
    pub lasalle: Vec<LaSalleState>,
    /// Per-sample event markers; empty string when nothing happened.
    pub event_markers: Vec<String>,
    /// Every event applied, at full time resolution.
    pub event_log: Vec<(f64, String)>,
    /// Set when the run tripped the divergence guard and was truncated.
    pub divergence: Option<f64>,
}

impl TrajectoryRecord {
    fn with_capacity(step: f64, record_every: usize, samples: usize) -> Self {
        TrajectoryRecord {
            step,
            record_every,
            times: Vec::with_capacity(samples),
            states: Vec::with_capacity(samples),
            inputs: Vec::with_capacity(samples),
            outputs: Vec::with_capacity(samples),
            cost: Vec::with_capacity(samples),
            reference_cost: Vec::with_capacity(samples),
            lasalle: Vec::with_capacity(samples),
            event_markers: Vec::with_capacity(samples),
            event_log: Vec::new(),
            divergence: None,
        }
    }

    #[cfg(test)]
    pub(crate) fn for_test(times: Vec<f64>, lasalle: Vec<LaSalleState>) -> Self {
        let n = times.len();
        TrajectoryRecord {
            step: if n > 1 { times[1] - times[0] } else { 1.0 },
            record_every: 1,
            times,
            states: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            cost: vec![0.0; n],
            reference_cost: vec![0.0; n],
            lasalle,
            event_markers: vec![String::new(); n],
            event_log: Vec::new(),
            divergence: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_residual(&self) -> f64 {
        self.lasalle.last().map(|s| s.psi_norm).unwrap_or(f64::NAN)
    }

    pub fn final_tracking_error(&self) -> f64 {
        self.lasalle.last().map(|s| s.phi_norm).unwrap_or(f64::NAN)
    }
}

/// Outcome bucket for a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunClass {
    Converged,
    BoundedNonConverged,
    Diverged,
}

impl fmt::Display for RunClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self {
            RunClass::Converged => "converged",
            RunClass::BoundedNonConverged => "bounded_nonconverged",
            RunClass::Diverged => "diverged",
        };
        f.write_str(label)
    }
}

pub fn classify(record: &TrajectoryRecord, residual_tol: f64) -> RunClass {
    if record.divergence.is_some() {
        RunClass::Diverged
    } else if record.final_residual() <= residual_tol {
        RunClass::Converged
    } else {
        RunClass::BoundedNonConverged
    }
}

/// Stable, versioned summary of one run; serialized as TOML by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub classification: String,
    pub final_time: f64,
    pub final_residual: f64,
    pub final_tracking_error: f64,
    pub final_cost: f64,
    pub final_reference_cost: f64,
    pub final_frequency_output: Option<f64>,
    pub epsilon: f64,
    pub epsilon_star: f64,
    pub beta: f64,
    pub ell: f64,
    pub delta_star: f64,
    pub p_min_eigenvalue: f64,
    pub events_applied: usize,
    pub stale_model_events: usize,
    pub model_update_on_event: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence_time: Option<f64>,
    pub steps: usize,
    pub step_s: f64,
    pub record_every: usize,
    pub seed: u64,
}

/// Build the run summary from the *initial* certificate (so certify and
/// simulate report identical values for the same case) plus the record.
pub fn summarize(
    loop_: &ClosedLoop,
    scenario: &Scenario,
    record: &TrajectoryRecord,
) -> RunSummary {
    let cert = &loop_.certificate;
    let events_applied = record.event_log.len();
    RunSummary {
        format_version: 1,
        classification: classify(record, scenario.residual_tol).to_string(),
        final_time: record.times.last().copied().unwrap_or(0.0),
        final_residual: record.final_residual(),
        final_tracking_error: record.final_tracking_error(),
        final_cost: record.cost.last().copied().unwrap_or(f64::NAN),
        final_reference_cost: record.reference_cost.last().copied().unwrap_or(f64::NAN),
        final_frequency_output: if loop_.grid.is_some() {
            record.outputs.last().map(|y| y[0])
        } else {
            None
        },
        epsilon: loop_.epsilon(),
        epsilon_star: cert.epsilon_star(),
        beta: cert.beta(),
        ell: cert.ell(),
        delta_star: cert.delta_star(),
        p_min_eigenvalue: cert.p_min_eigenvalue(),
        events_applied,
        stale_model_events: if scenario.model_update_on_event {
            0
        } else {
            events_applied
        },
        model_update_on_event: scenario.model_update_on_event,
        divergence_time: record.divergence,
        steps: ((scenario.duration / scenario.step).round() as usize).max(1),
        step_s: scenario.step,
        record_every: scenario.record_every,
        seed: scenario.seed,
    }
}

// ---------------------------------------------------------------------------
// The main loop
// ---------------------------------------------------------------------------

/// Run the interconnection over a scenario.
///
/// Per step: `x <- a_d x + b_d u + q_d w(t)` (exact for the held `u`, `w`),
/// then `u <- u + step * (-eps H~^T grad Phi(x, u))`. Events apply at the
/// step boundary they are scheduled on: the plant is rebuilt, discretization
/// and certificate recomputed, and the controller's steady-state model
/// refreshed only when the scenario says so. Divergence truncates the record
/// instead of failing, so sweeps always complete.
pub fn run(loop_: &ClosedLoop, scenario: &Scenario) -> Result<TrajectoryRecord, SimError> {
    scenario.validate()?;
    if !scenario.events.is_empty() && loop_.grid.is_none() {
        return Err(SimError::BadScenario(
            "events require a grid-backed closed loop".into(),
        ));
    }
    for seg in &scenario.loads {
        if seg.values.len() != loop_.plant.disturbance_dim() {
            return Err(SimError::BadScenario(format!(
                "load segment has {} entries, plant expects {}",
                seg.values.len(),
                loop_.plant.disturbance_dim()
            )));
        }
    }

    let mut plant = loop_.plant.clone();
    let mut ssm = loop_.ssm.clone();
    let mut cert = loop_.certificate.clone();
    let mut objective = loop_.objective.clone();
    let mut controller = loop_.controller.clone();
    let mut grid = loop_.grid.clone();

    let step = scenario.step;
    let total_steps = ((scenario.duration / step).round() as usize).max(1);
    let mut disc = DiscretizedPlant::new(&plant, step)?;

    let w0 = scenario.load_at(0.0, &loop_.default_w);
    let mut u = scenario
        .initial_u
        .clone()
        .unwrap_or_else(|| loop_.default_u.clone());
    if u.len() != plant.input_dim() {
        return Err(SimError::BadScenario(format!(
            "initial_u has {} entries, plant expects {}",
            u.len(),
            plant.input_dim()
        )));
    }
    let mut x = match &scenario.initial_x {
        Some(x0) => {
            if x0.len() != plant.state_dim() {
                return Err(SimError::BadScenario(format!(
                    "initial_x has {} entries, plant expects {}",
                    x0.len(),
                    plant.state_dim()
                )));
            }
            x0.clone()
        }
        None => ssm.steady_state(&u, &w0),
    };

    let oracle_settings = OracleSettings::default();
    let mut reference = oracle::solve_instantaneous(&*objective, &ssm, &w0, &u, &oracle_settings)
        .map_err(SimError::Oracle)?;
    let mut segment = scenario.segment_index(0.0);

    let samples = total_steps / scenario.record_every + 2;
    let mut record = TrajectoryRecord::with_capacity(step, scenario.record_every, samples);
    let push_sample = |record: &mut TrajectoryRecord,
                           t: f64,
                           x: &DVector<f64>,
                           u: &DVector<f64>,
                           w: &DVector<f64>,
                           markers: &mut Vec<String>,
                           cert: &StabilityCertificate,
                           ssm: &SteadyStateMap,
                           objective: &Arc<dyn Objective>,
                           plant: &LtiPlant,
                           reference_cost: f64| {
        record.times.push(t);
        record.states.push(x.clone());
        record.inputs.push(u.clone());
        record.outputs.push(plant.output(x, u));
        record.cost.push(objective.value(x, u));
        record.reference_cost.push(reference_cost);
        record
            .lasalle
            .push(evaluate_lasalle(cert, ssm, &**objective, x, u, w));
        record.event_markers.push(markers.join(" & "));
        markers.clear();
    };

    let mut pending_markers: Vec<String> = Vec::new();
    push_sample(
        &mut record,
        0.0,
        &x,
        &u,
        &w0,
        &mut pending_markers,
        &cert,
        &ssm,
        &objective,
        &plant,
        reference.cost,
    );

    let mut next_event = 0usize;
    for k in 0..total_steps {
        let t = k as f64 * step;

        // Apply events scheduled at this boundary (within half a step).
        while next_event < scenario.events.len()
            && scenario.events[next_event].time <= t + 0.5 * step
        {
            let ev = &scenario.events[next_event];
            let ctx = grid.as_mut().expect("checked above");
            let (new_plant, new_case) = powergrid::apply_event(&ctx.plant, &ctx.case, &ev.event)?;
            ctx.case = new_case;
            ctx.plant = new_plant;
            let new_objective = Arc::new(powergrid::penalty_objective(&ctx.case, &ctx.plant)?);
            let new_ssm = SteadyStateMap::new(&ctx.plant.reduced)?;
            let ell = lipschitz_bound_analytic(&new_objective, &new_ssm)?;
            cert = certificate_from_lyapunov(
                ctx.plant.lyapunov_p.clone(),
                ctx.plant.lyapunov_min_eig,
                &new_ssm,
                ell,
            )?;
            plant = ctx.plant.reduced.clone();
            disc = DiscretizedPlant::new(&plant, step)?;
            objective = new_objective as Arc<dyn Objective>;
            controller.set_objective(objective.clone());
            if scenario.model_update_on_event {
                controller.set_model(new_ssm.clone());
            }
            ssm = new_ssm;
            let marker = ev.event.marker();
            record.event_log.push((t, marker.clone()));
            pending_markers.push(marker);

            let w_now = scenario.load_at(t, &loop_.default_w);
            reference =
                oracle::solve_instantaneous(&*objective, &ssm, &w_now, &u, &oracle_settings)
                    .map_err(SimError::Oracle)?;
            next_event += 1;
        }

        // Reference re-solve at load segment boundaries.
        let seg_now = scenario.segment_index(t);
        if seg_now != segment {
            segment = seg_now;
            if let Some(i) = seg_now {
                let w_boundary = scenario.loads[i].values.clone();
                reference = oracle::solve_instantaneous(
                    &*objective,
                    &ssm,
                    &w_boundary,
                    &u,
                    &oracle_settings,
                )
                .map_err(|e| match e {
                    OracleError::NotConverged {
                        residual,
                        iterations,
                        ..
                    } => SimError::Oracle(OracleError::NotConverged {
                        residual,
                        iterations,
                        time: Some(scenario.loads[i].start),
                    }),
                })?;
            }
        }

        let w = scenario.load_at(t, &loop_.default_w);
        x = disc.advance(&x, &u, &w);
        let du = controller.control_derivative(&x, &u);
        u += du * step;

        let t_next = (k + 1) as f64 * step;
        let finite = x.iter().all(|v| v.is_finite()) && u.iter().all(|v| v.is_finite());
        let bounded = x.amax() <= scenario.divergence_guard && u.amax() <= scenario.divergence_guard;
        if !finite || !bounded {
            record.divergence = Some(t_next);
            break;
        }

        if (k + 1) % scenario.record_every == 0 || k + 1 == total_steps {
            let w_sample = scenario.load_at(t_next, &loop_.default_w);
            push_sample(
                &mut record,
                t_next,
                &x,
                &u,
                &w_sample,
                &mut pending_markers,
                &cert,
                &ssm,
                &objective,
                &plant,
                reference.cost,
            );
        }
    }

    Ok(record)
}

// ---------------------------------------------------------------------------
// Gain sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub horizon: f64,
    pub step: f64,
    /// Amplitude of the uniform input perturbation each run starts from.
    pub perturbation: f64,
    pub seed: u64,
    pub residual_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            horizon: 4000.0,
            step: 0.05,
            perturbation: 0.1,
            seed: 0,
            residual_tol: DEFAULT_RESIDUAL_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub multiplier: f64,
    pub epsilon: f64,
    pub classification: RunClass,
    pub final_residual: f64,
    pub divergence_time: Option<f64>,
}

/// Run the loop at `epsilon = k * epsilon_star` for each multiplier, from a
/// seeded perturbed initial input, and classify each run.
pub fn sweep_epsilon(
    base: &ClosedLoop,
    multipliers: &[f64],
    config: &SweepConfig,
) -> Result<Vec<SweepRow>, SimError> {
    assert!(
        multipliers.iter().all(|&k| k > 0.0),
        "multipliers must be positive"
    );
    assert!(
        multipliers.windows(2).all(|w| w[0] <= w[1]),
        "multipliers must be sorted"
    );
    let mut rows = Vec::with_capacity(multipliers.len());
    for (i, &k) in multipliers.iter().enumerate() {
        let run_loop = base.with_epsilon_multiplier(k);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
        let perturbed = DVector::from_fn(base.default_u.len(), |j, _| {
            base.default_u[j] + rng.random_range(-config.perturbation..config.perturbation)
        });
        let mut scenario = Scenario::constant(
            config.horizon,
            config.step,
            EpsilonPolicy::Absolute(run_loop.epsilon()),
        );
        scenario.seed = config.seed;
        scenario.residual_tol = config.residual_tol;
        scenario.initial_u = Some(perturbed);
        scenario.initial_x = Some(base.ssm.steady_state(&base.default_u, &base.default_w));
        let record = run(&run_loop, &scenario)?;
        rows.push(SweepRow {
            multiplier: k,
            epsilon: run_loop.epsilon(),
            classification: classify(&record, config.residual_tol),
            final_residual: record.final_residual(),
            divergence_time: record.divergence,
        });
    }
    Ok(rows)
}

/// Smallest multiplier whose run did not converge, if any.
pub fn first_unstable(rows: &[SweepRow]) -> Option<f64> {
    rows.iter()
        .find(|r| r.classification != RunClass::Converged)
        .map(|r| r.multiplier)
}

// ---------------------------------------------------------------------------
// Output formats
// ---------------------------------------------------------------------------

/// Write the stable CSV contract:
/// `t,x_0..,u_0..,y_0..,phi,phi_star,V,W,Z,psi_norm,phi_err_norm,event`.
pub fn write_trajectory_csv<W: io::Write>(
    record: &TrajectoryRecord,
    out: &mut W,
) -> io::Result<()> {
    let (n, p, m) = match record.states.first() {
        Some(x) => (
            x.len(),
            record.inputs[0].len(),
            record.outputs[0].len(),
        ),
        None => (0, 0, 0),
    };
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..p).map(|i| format!("u_{i}")));
    header.extend((0..m).map(|i| format!("y_{i}")));
    for tail in ["phi", "phi_star", "V", "W", "Z", "psi_norm", "phi_err_norm", "event"] {
        header.push(tail.to_string());
    }
    writeln!(out, "{}", header.join(","))?;
    for k in 0..record.len() {
        let mut row = Vec::with_capacity(header.len());
        row.push(format!("{}", record.times[k]));
        for v in record.states[k].iter() {
            row.push(format!("{v}"));
        }
        for v in record.inputs[k].iter() {
            row.push(format!("{v}"));
        }
        for v in record.outputs[k].iter() {
            row.push(format!("{v}"));
        }
        let s = &record.lasalle[k];
        row.push(format!("{}", record.cost[k]));
        row.push(format!("{}", record.reference_cost[k]));
        row.push(format!("{}", s.v_value));
        row.push(format!("{}", s.w_value));
        row.push(format!("{}", s.z_value));
        row.push(format!("{}", s.psi_norm));
        row.push(format!("{}", s.phi_norm));
        row.push(record.event_markers[k].clone());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Sweep table: `multiplier,epsilon,classification,final_residual,divergence_time`.
pub fn write_sweep_csv<W: io::Write>(rows: &[SweepRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "multiplier,epsilon,classification,final_residual,divergence_time")?;
    for row in rows {
        let divergence = row
            .divergence_time
            .map(|t| format!("{t}"))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.multiplier, row.epsilon, row.classification, row.final_residual, divergence
        )?;
    }
    Ok(())
}
