//! Power-system plant construction: DC power flow over a line graph, swing
//! and turbine-governor dynamics per bus, the frequency/line-flow output map,
//! and the coordinate reduction that removes the marginally stable uniform
//! angle-translation mode so the plant can be certified.
//!
//! State layout: full plant `(theta, omega, p_m)` of dimension `3r`; reduced
//! plant `(theta_tilde, omega, p_m)` of dimension `3r - 1`, where
//! `theta = e theta_tilde` and the columns of `e` span the orthogonal
//! complement of the all-ones vector.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::objective::{ObjectiveError, PenaltyObjective};
use crate::plant::{certify_stability, LtiPlant, PlantError};

#[derive(Debug, Clone, PartialEq)]
pub enum GridError {
    DisconnectedGraph,
    UnknownBus(u32),
    UnknownLine(usize),
    InvalidCase(String),
    Plant(PlantError),
    Objective(ObjectiveError),
    Parse(String),
}

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridError::DisconnectedGraph => write!(f, "line graph is not connected"),
            GridError::UnknownBus(id) => write!(f, "unknown bus id {id}"),
            GridError::UnknownLine(idx) => write!(f, "unknown line index {idx}"),
            GridError::InvalidCase(msg) => write!(f, "invalid case: {msg}"),
            GridError::Plant(e) => write!(f, "{e}"),
            GridError::Objective(e) => write!(f, "{e}"),
            GridError::Parse(msg) => write!(f, "case parse error: {msg}"),
        }
    }
}

impl std::error::Error for GridError {}

impl From<PlantError> for GridError {
    fn from(e: PlantError) -> Self {
        GridError::Plant(e)
    }
}

impl From<ObjectiveError> for GridError {
    fn from(e: ObjectiveError) -> Self {
        GridError::Objective(e)
    }
}

/// One generator bus. Field names are the case-file contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSpec {
    pub id: u32,
    /// Inertia constant M_i, seconds.
    pub inertia_s: f64,
    /// Damping constant D_i, per unit.
    pub damping_pu: f64,
    /// Turbine-governor time constant T_i, seconds.
    pub gov_time_s: f64,
    /// Droop constant R_i, Hz per pu.
    pub droop_hz_per_pu: f64,
    /// Base power demand at the bus, per unit.
    pub load_pu: f64,
    pub gen_min_pu: f64,
    pub gen_max_pu: f64,
}

fn default_true() -> bool {
    true
}

/// One transmission line. Field names are the case-file contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: u32,
    pub to: u32,
    pub susceptance_pu: f64,
    pub rating_pu: f64,
    /// Tripped lines stay listed so the output dimension never changes; their
    /// susceptance simply stops contributing.
    #[serde(default = "default_true")]
    pub in_service: bool,
}

/// Economic cost and penalty weights, `[objective]` in the case file.
/// `f(u) = 1/2 sum quadratic_i u_i^2 + sum linear_i u_i`; empty coefficient
/// lists mean zero cost (pure frequency regulation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveSpec {
    pub quadratic: Vec<f64>,
    pub linear: Vec<f64>,
    pub xi_gen: f64,
    pub xi_line: f64,
    pub xi_freq: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            quadratic: Vec::new(),
            linear: Vec::new(),
            xi_gen: 1e3,
            xi_line: 1e3,
            xi_freq: 1e7,
        }
    }
}

/// A validated grid case: buses, lines, and the objective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub objective: ObjectiveSpec,
}

impl GridCase {
    pub fn new(
        buses: Vec<BusSpec>,
        lines: Vec<LineSpec>,
        objective: ObjectiveSpec,
    ) -> Result<Self, GridError> {
        let case = GridCase {
            buses,
            lines,
            objective,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GridError> {
        let case: GridCase = toml::from_str(text).map_err(|e| GridError::Parse(e.to_string()))?;
        case.validate()?;
        Ok(case)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GridError::Parse(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let r = self.buses.len();
        if r == 0 {
            return Err(GridError::InvalidCase("case has no buses".into()));
        }
        let mut ids = HashSet::new();
        for bus in &self.buses {
            if !ids.insert(bus.id) {
                return Err(GridError::InvalidCase(format!("duplicate bus id {}", bus.id)));
            }
            for (v, name) in [
                (bus.inertia_s, "inertia_s"),
                (bus.damping_pu, "damping_pu"),
                (bus.gov_time_s, "gov_time_s"),
                (bus.droop_hz_per_pu, "droop_hz_per_pu"),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(GridError::InvalidCase(format!(
                        "bus {}: {name} must be positive, got {v}",
                        bus.id
                    )));
                }
            }
            if bus.gen_min_pu > bus.gen_max_pu {
                return Err(GridError::InvalidCase(format!(
                    "bus {}: gen_min_pu exceeds gen_max_pu",
                    bus.id
                )));
            }
        }
        let mut keys = HashSet::new();
        for (idx, line) in self.lines.iter().enumerate() {
            if line.from == line.to {
                return Err(GridError::InvalidCase(format!(
                    "line {idx} connects bus {} to itself",
                    line.from
                )));
            }
            self.bus_index(line.from)?;
            self.bus_index(line.to)?;
            if !(line.susceptance_pu > 0.0 && line.susceptance_pu.is_finite()) {
                return Err(GridError::InvalidCase(format!(
                    "line {idx}: susceptance_pu must be positive"
                )));
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !keys.insert(key) {
                return Err(GridError::InvalidCase(format!(
                    "duplicate line between buses {} and {}",
                    key.0, key.1
                )));
            }
        }
        if !self.objective.quadratic.is_empty() && self.objective.quadratic.len() != r {
            return Err(GridError::InvalidCase(format!(
                "objective.quadratic must have one entry per bus ({r})"
            )));
        }
        if !self.objective.linear.is_empty() && self.objective.linear.len() != r {
            return Err(GridError::InvalidCase(format!(
                "objective.linear must have one entry per bus ({r})"
            )));
        }
        for (v, name) in [
            (self.objective.xi_gen, "xi_gen"),
            (self.objective.xi_line, "xi_line"),
            (self.objective.xi_freq, "xi_freq"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GridError::InvalidCase(format!("objective.{name} must be positive")));
            }
        }
        if !self.is_connected() {
            return Err(GridError::DisconnectedGraph);
        }
        Ok(())
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn bus_index(&self, id: u32) -> Result<usize, GridError> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or(GridError::UnknownBus(id))
    }

    pub fn loads(&self) -> DVector<f64> {
        DVector::from_iterator(self.buses.len(), self.buses.iter().map(|b| b.load_pu))
    }

    pub fn gen_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.buses.len(), self.buses.iter().map(|b| b.gen_min_pu))
    }

    pub fn gen_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.buses.len(), self.buses.iter().map(|b| b.gen_max_pu))
    }

    pub fn ratings(&self) -> DVector<f64> {
        DVector::from_iterator(self.lines.len(), self.lines.iter().map(|l| l.rating_pu))
    }

    /// `sum_i (D_i + 1/R_i)`: the droop-plus-damping stiffness that sets the
    /// steady-state frequency response to a power imbalance.
    pub fn frequency_stiffness(&self) -> f64 {
        self.buses
            .iter()
            .map(|b| b.damping_pu + 1.0 / b.droop_hz_per_pu)
            .sum()
    }

    /// Steady-state frequency deviation for constant injections:
    /// `(1^T (p_c - p_l)) / (1^T (D + R^{-1}) 1)`.
    pub fn steady_state_frequency(&self, p_c: &DVector<f64>, p_l: &DVector<f64>) -> f64 {
        (p_c - p_l).sum() / self.frequency_stiffness()
    }

    fn is_connected(&self) -> bool {
        let r = self.buses.len();
        if r <= 1 {
            return true;
        }
        let mut adjacency = vec![Vec::new(); r];
        for line in self.lines.iter().filter(|l| l.in_service) {
            let (i, j) = (
                self.bus_index(line.from).expect("validated"),
                self.bus_index(line.to).expect("validated"),
            );
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        let mut seen = vec![false; r];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == r
    }

    /// Copy of the case with the generation ceiling at `bus` scaled by
    /// `factor` (0.5 models losing half the capacity). The dynamics are
    /// untouched.
    pub fn with_derated_generator(&self, bus: u32, factor: f64) -> Result<GridCase, GridError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(GridError::InvalidCase(format!(
                "derate factor must be positive, got {factor}"
            )));
        }
        let idx = self.bus_index(bus)?;
        let mut case = self.clone();
        case.buses[idx].gen_max_pu *= factor;
        if case.buses[idx].gen_min_pu > case.buses[idx].gen_max_pu {
            return Err(GridError::InvalidCase(format!(
                "derating bus {bus} by {factor} drops gen_max below gen_min"
            )));
        }
        Ok(case)
    }

    /// Copy of the case with the given lines (indices into `lines`) taken out
    /// of service. Fails with `DisconnectedGraph` if the remaining in-service
    /// lines no longer connect every bus.
    pub fn with_tripped_lines(&self, lines: &[usize]) -> Result<GridCase, GridError> {
        let mut case = self.clone();
        for &idx in lines {
            if idx >= case.lines.len() {
                return Err(GridError::UnknownLine(idx));
            }
            case.lines[idx].in_service = false;
        }
        if !case.is_connected() {
            return Err(GridError::DisconnectedGraph);
        }
        Ok(case)
    }
}

/// Bus Laplacian `B` (r x r) and line-flow incidence `B_line` (s x r);
/// line flows are `p_line = B_line theta`. Out-of-service lines contribute a
/// zero row so line indexing is stable across trips.
pub fn build_laplacian(case: &GridCase) -> Result<(DMatrix<f64>, DMatrix<f64>), GridError> {
    let r = case.bus_count();
    let s = case.line_count();
    let mut b_matrix = DMatrix::<f64>::zeros(r, r);
    let mut b_line = DMatrix::<f64>::zeros(s, r);
    for (l, line) in case.lines.iter().enumerate() {
        if !line.in_service {
            continue;
        }
        let i = case.bus_index(line.from)?;
        let j = case.bus_index(line.to)?;
        let b = line.susceptance_pu;
        b_matrix[(i, i)] += b;
        b_matrix[(j, j)] += b;
        b_matrix[(i, j)] -= b;
        b_matrix[(j, i)] -= b;
        b_line[(l, i)] = b;
        b_line[(l, j)] = -b;
    }
    if !case.is_connected() {
        return Err(GridError::DisconnectedGraph);
    }
    Ok((b_matrix, b_line))
}

/// Orthonormal basis of the complement of the all-ones direction, built from
/// the Householder reflector that maps `1/sqrt(r)` onto the first coordinate
/// axis. Deterministic, no grounding bus is singled out.
pub fn reduction_basis(r: usize) -> DMatrix<f64> {
    assert!(r >= 1);
    if r == 1 {
        return DMatrix::zeros(1, 0);
    }
    let ones = DVector::from_element(r, 1.0 / (r as f64).sqrt());
    let mut v = ones;
    v[0] -= 1.0;
    let reflector = DMatrix::identity(r, r) - &v * v.transpose() * (2.0 / v.norm_squared());
    reflector.columns(1, r - 1).into()
}

/// The grid as an LTI plant, in both full and reduced coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPlant {
    pub full: LtiPlant,
    pub reduced: LtiPlant,
    /// Angle reduction basis `e` with `theta = e theta_tilde`.
    pub basis: DMatrix<f64>,
    pub laplacian: DMatrix<f64>,
    pub line_incidence: DMatrix<f64>,
    /// Lyapunov certificate of the reduced plant, cached at assembly.
    pub lyapunov_p: DMatrix<f64>,
    pub lyapunov_min_eig: f64,
}

impl GridPlant {
    /// Index of `omega_1` in the reduced state vector.
    pub fn omega_offset_reduced(&self) -> usize {
        self.basis.ncols()
    }
}

/// Assemble the swing/governor dynamics into full and reduced plants and
/// certify the reduced one.
///
/// Full blocks (r rows each):
/// `theta' = omega`,
/// `omega' = -M^{-1}(B theta + D omega - p_m + p_l)`,
/// `p_m'   = -T^{-1}(R^{-1} omega + p_m - p_c)`,
/// with input `u = p_c`, disturbance `w = p_l`, and outputs
/// `y = (omega_1, B_line theta)`.
pub fn assemble_plant(case: &GridCase) -> Result<GridPlant, GridError> {
    let r = case.bus_count();
    let s = case.line_count();
    let (b_matrix, b_line) = build_laplacian(case)?;
    let m_inv = DVector::from_iterator(r, case.buses.iter().map(|b| 1.0 / b.inertia_s));
    let d = DVector::from_iterator(r, case.buses.iter().map(|b| b.damping_pu));
    let t_inv = DVector::from_iterator(r, case.buses.iter().map(|b| 1.0 / b.gov_time_s));
    let r_inv = DVector::from_iterator(r, case.buses.iter().map(|b| 1.0 / b.droop_hz_per_pu));

    let scale_rows = |mat: &DMatrix<f64>, scale: &DVector<f64>| -> DMatrix<f64> {
        DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| scale[i] * mat[(i, j)])
    };

    // Full plant on (theta, omega, p_m).
    let n_full = 3 * r;
    let mut a_full = DMatrix::<f64>::zeros(n_full, n_full);
    a_full
        .view_mut((0, r), (r, r))
        .copy_from(&DMatrix::identity(r, r));
    a_full
        .view_mut((r, 0), (r, r))
        .copy_from(&(-scale_rows(&b_matrix, &m_inv)));
    for i in 0..r {
        a_full[(r + i, r + i)] = -m_inv[i] * d[i];
        a_full[(r + i, 2 * r + i)] = m_inv[i];
        a_full[(2 * r + i, r + i)] = -t_inv[i] * r_inv[i];
        a_full[(2 * r + i, 2 * r + i)] = -t_inv[i];
    }
    let mut b_full = DMatrix::<f64>::zeros(n_full, r);
    let mut q_full = DMatrix::<f64>::zeros(n_full, r);
    for i in 0..r {
        b_full[(2 * r + i, i)] = t_inv[i];
        q_full[(r + i, i)] = -m_inv[i];
    }
    let mut c_full = DMatrix::<f64>::zeros(1 + s, n_full);
    c_full[(0, r)] = 1.0;
    c_full.view_mut((1, 0), (s, r)).copy_from(&b_line);
    let full = LtiPlant::new(
        a_full,
        b_full,
        q_full,
        c_full,
        DMatrix::zeros(1 + s, r),
    )?;

    // Reduced plant on (theta_tilde, omega, p_m) with theta = e theta_tilde.
    let e = reduction_basis(r);
    let k = e.ncols();
    let n_red = k + 2 * r;
    let mut a_red = DMatrix::<f64>::zeros(n_red, n_red);
    a_red.view_mut((0, k), (k, r)).copy_from(&e.transpose());
    a_red
        .view_mut((k, 0), (r, k))
        .copy_from(&(-scale_rows(&(&b_matrix * &e), &m_inv)));
    for i in 0..r {
        a_red[(k + i, k + i)] = -m_inv[i] * d[i];
        a_red[(k + i, k + r + i)] = m_inv[i];
        a_red[(k + r + i, k + i)] = -t_inv[i] * r_inv[i];
        a_red[(k + r + i, k + r + i)] = -t_inv[i];
    }
    let mut b_red = DMatrix::<f64>::zeros(n_red, r);
    let mut q_red = DMatrix::<f64>::zeros(n_red, r);
    for i in 0..r {
        b_red[(k + r + i, i)] = t_inv[i];
        q_red[(k + i, i)] = -m_inv[i];
    }
    let mut c_red = DMatrix::<f64>::zeros(1 + s, n_red);
    c_red[(0, k)] = 1.0;
    c_red.view_mut((1, 0), (s, k)).copy_from(&(&b_line * &e));
    let reduced = LtiPlant::new(
        a_red,
        b_red,
        q_red,
        c_red,
        DMatrix::zeros(1 + s, r),
    )?;

    let (lyapunov_p, lyapunov_min_eig) = certify_stability(&reduced)?;

    Ok(GridPlant {
        full,
        reduced,
        basis: e,
        laplacian: b_matrix,
        line_incidence: b_line,
        lyapunov_p,
        lyapunov_min_eig,
    })
}

/// Build the soft-constrained objective of the grid problem from the case
/// and the reduced output map: economic cost on setpoints, box penalties on
/// generation, the frequency target `0 <= omega_1 <= 0`, and line ratings
/// `-rating <= p_line <= rating`.
pub fn penalty_objective(case: &GridCase, plant: &GridPlant) -> Result<PenaltyObjective, GridError> {
    let r = case.bus_count();
    let s = case.line_count();
    let quadratic = if case.objective.quadratic.is_empty() {
        DVector::zeros(r)
    } else {
        DVector::from_column_slice(&case.objective.quadratic)
    };
    let linear = if case.objective.linear.is_empty() {
        DVector::zeros(r)
    } else {
        DVector::from_column_slice(&case.objective.linear)
    };
    let ratings = case.ratings();
    let mut y_lo = DVector::zeros(1 + s);
    let mut y_hi = DVector::zeros(1 + s);
    for l in 0..s {
        y_lo[1 + l] = -ratings[l];
        y_hi[1 + l] = ratings[l];
    }
    let mut xi_y = DVector::from_element(1 + s, case.objective.xi_line);
    xi_y[0] = case.objective.xi_freq;
    Ok(PenaltyObjective::new(
        quadratic,
        linear,
        case.gen_min(),
        case.gen_max(),
        y_lo,
        y_hi,
        DVector::from_element(r, case.objective.xi_gen),
        xi_y,
        plant.reduced.c().clone(),
        DMatrix::zeros(1 + s, r),
    )?)
}

/// Probe box for the sampled Lipschitz estimator: inputs range over the
/// generation limits, states over the envelope of the corresponding steady
/// states padded by half its span plus a small absolute margin.
pub fn default_probe_region(
    case: &GridCase,
    plant: &GridPlant,
) -> Result<crate::objective::ProbeRegion, GridError> {
    let ssm = crate::plant::SteadyStateMap::new(&plant.reduced)?;
    let w = case.loads();
    let x_at_min = ssm.steady_state(&case.gen_min(), &w);
    let x_at_max = ssm.steady_state(&case.gen_max(), &w);
    let n = x_at_min.len();
    let mut x_lo = DVector::zeros(n);
    let mut x_hi = DVector::zeros(n);
    for i in 0..n {
        let lo = x_at_min[i].min(x_at_max[i]);
        let hi = x_at_min[i].max(x_at_max[i]);
        let pad = 0.5 * (hi - lo) + 0.1;
        x_lo[i] = lo - pad;
        x_hi[i] = hi + pad;
    }
    Ok(crate::objective::ProbeRegion {
        x_lo,
        x_hi,
        u_lo: case.gen_min(),
        u_hi: case.gen_max(),
    })
}

/// A structural change applied to the grid mid-run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridEvent {
    /// Scale the generation ceiling at `bus` by `factor`.
    GeneratorDerate { bus: u32, factor: f64 },
    /// Take lines (indices into the case line list) out of service.
    LineTrip { lines: Vec<usize> },
}

impl GridEvent {
    /// Compact, comma-free marker for trajectory records.
    pub fn marker(&self) -> String {
        match self {
            GridEvent::GeneratorDerate { bus, factor } => {
                format!("generator_derate bus={bus} factor={factor}")
            }
            GridEvent::LineTrip { lines } => {
                let ids: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
                format!("line_trip lines={}", ids.join("+"))
            }
        }
    }
}

/// Apply an event and return the updated plant and case. A derate leaves the
/// dynamics untouched, so the existing plant (with its cached certification)
/// is reused; a line trip mutates the matrices and forces reassembly and
/// re-certification. The returned plant reflects the new truth; whether the
/// *controller's* steady-state model follows is the simulation's decision,
/// not this function's.
pub fn apply_event(
    plant: &GridPlant,
    case: &GridCase,
    event: &GridEvent,
) -> Result<(GridPlant, GridCase), GridError> {
    match event {
        GridEvent::GeneratorDerate { bus, factor } => {
            let new_case = case.with_derated_generator(*bus, *factor)?;
            Ok((plant.clone(), new_case))
        }
        GridEvent::LineTrip { lines } => {
            let new_case = case.with_tripped_lines(lines)?;
            let new_plant = assemble_plant(&new_case)?;
            Ok((new_plant, new_case))
        }
    }
}

/// Bundled 3-bus triangle with hand-checkable steady states and a strictly
/// interior optimum.
pub fn three_bus_case() -> GridCase {
    let bus = |id: u32, load: f64| BusSpec {
        id,
        inertia_s: 5.0,
        damping_pu: 3.0,
        gov_time_s: 4.0,
        droop_hz_per_pu: 0.25,
        load_pu: load,
        gen_min_pu: 0.0,
        gen_max_pu: 1.0,
    };
    let line = |from: u32, to: u32| LineSpec {
        from,
        to,
        susceptance_pu: 2.0,
        rating_pu: 1.0,
        in_service: true,
    };
    GridCase::new(
        vec![bus(1, 0.2), bus(2, 0.3), bus(3, 0.1)],
        vec![line(1, 2), line(2, 3), line(1, 3)],
        ObjectiveSpec {
            // f(u) = 1/2 sum g_i (u_i - a_i)^2 with g = (4, 5, 8) and
            // dispatch targets a = (0.25, 0.2, 0.1), expanded.
            quadratic: vec![4.0, 5.0, 8.0],
            linear: vec![-1.0, -1.0, -0.8],
            xi_gen: 100.0,
            xi_line: 20.0,
            xi_freq: 1000.0,
        },
    )
    .expect("bundled case is valid")
}

/// Bundled 9-bus meshed case: a ring with three chords. Lighter damping and
/// droop than the 3-bus case, so pushing the gain well past the certified
/// bound actually destabilizes the interconnection.
pub fn nine_bus_case() -> GridCase {
    let loads = [0.25, 0.30, 0.20, 0.35, 0.25, 0.30, 0.20, 0.25, 0.30];
    let buses = (0..9)
        .map(|i| BusSpec {
            id: i as u32 + 1,
            inertia_s: 6.0,
            damping_pu: 1.0,
            gov_time_s: 5.0,
            droop_hz_per_pu: 0.6,
            load_pu: loads[i],
            gen_min_pu: 0.0,
            gen_max_pu: 1.0,
        })
        .collect();
    let mut lines: Vec<LineSpec> = (1..=9u32)
        .map(|i| LineSpec {
            from: i,
            to: if i == 9 { 1 } else { i + 1 },
            susceptance_pu: 2.0,
            rating_pu: 2.0,
            in_service: true,
        })
        .collect();
    for (from, to) in [(1u32, 5u32), (3, 7), (6, 9)] {
        lines.push(LineSpec {
            from,
            to,
            susceptance_pu: 1.5,
            rating_pu: 2.0,
            in_service: true,
        });
    }
    // f(u) = 1/2 sum 3 (u_i - a_i)^2 expanded, with dispatch targets a
    // summing to 2.38 against a base load of 2.40, so the final equilibrium
    // sits strictly inside every constraint with a small nonzero marginal
    // cost.
    GridCase::new(
        buses,
        lines,
        ObjectiveSpec {
            quadratic: vec![3.0; 9],
            linear: vec![-0.9, -0.75, -0.6, -0.9, -0.75, -0.9, -0.6, -0.84, -0.9],
            xi_gen: 100.0,
            xi_line: 20.0,
            xi_freq: 1000.0,
        },
    )
    .expect("bundled case is valid")
}

/// Seeded random case for property tests: ring plus random chords, machine
/// constants drawn uniformly within +-50% of means (5 s, 3, 4 s, 0.25 Hz/pu).
pub fn random_case(seed: u64, bus_count: usize) -> GridCase {
    assert!(bus_count >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buses = (0..bus_count)
        .map(|i| BusSpec {
            id: i as u32 + 1,
            inertia_s: rng.random_range(2.5..7.5),
            damping_pu: rng.random_range(1.5..4.5),
            gov_time_s: rng.random_range(2.0..6.0),
            droop_hz_per_pu: rng.random_range(0.125..0.375),
            load_pu: rng.random_range(0.1..0.5),
            gen_min_pu: 0.0,
            gen_max_pu: 1.5,
        })
        .collect();
    let mut lines: Vec<LineSpec> = (0..bus_count)
        .map(|i| LineSpec {
            from: i as u32 + 1,
            to: ((i + 1) % bus_count) as u32 + 1,
            susceptance_pu: rng.random_range(1.0..3.0),
            rating_pu: 2.5,
            in_service: true,
        })
        .collect();
    if bus_count == 2 {
        lines.pop(); // the "ring" of two buses would duplicate the single line
    }
    let mut keys: HashSet<(u32, u32)> = lines
        .iter()
        .map(|l| (l.from.min(l.to), l.from.max(l.to)))
        .collect();
    for i in 1..=bus_count as u32 {
        for j in (i + 2)..=bus_count as u32 {
            if rng.random_range(0.0..1.0) < 0.25 && keys.insert((i, j)) {
                lines.push(LineSpec {
                    from: i,
                    to: j,
                    susceptance_pu: rng.random_range(1.0..3.0),
                    rating_pu: 2.5,
                    in_service: true,
                });
            }
        }
    }
    GridCase::new(buses, lines, ObjectiveSpec::default()).expect("random case is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::GradientController;
    use crate::plant::SteadyStateMap;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    #[test]
    fn laplacian_two_bus() {
        let case = GridCase::new(
            vec![
                BusSpec {
                    id: 1,
                    inertia_s: 5.0,
                    damping_pu: 3.0,
                    gov_time_s: 4.0,
                    droop_hz_per_pu: 0.25,
                    load_pu: 0.1,
                    gen_min_pu: 0.0,
                    gen_max_pu: 1.0,
                },
                BusSpec {
                    id: 2,
                    inertia_s: 5.0,
                    damping_pu: 3.0,
                    gov_time_s: 4.0,
                    droop_hz_per_pu: 0.25,
                    load_pu: 0.2,
                    gen_min_pu: 0.0,
                    gen_max_pu: 1.0,
                },
            ],
            vec![LineSpec {
                from: 1,
                to: 2,
                susceptance_pu: 1.0,
                rating_pu: 1.0,
                in_service: true,
            }],
            ObjectiveSpec::default(),
        )
        .unwrap();
        let (b, bl) = build_laplacian(&case).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(bl, DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
    }

    #[test]
    fn laplacian_triangle() {
        let case = three_bus_case();
        let (b, bl) = build_laplacian(&case).unwrap();
        // All susceptances 2: diagonal 4, off-diagonal -2.
        for i in 0..3 {
            assert_abs_diff_eq!(b[(i, i)], 4.0, epsilon = 1e-15);
            for j in 0..3 {
                if i != j {
                    assert_abs_diff_eq!(b[(i, j)], -2.0, epsilon = 1e-15);
                }
            }
        }
        let ones = DVector::from_element(3, 1.0);
        assert!((&b * &ones).norm() < 1e-14);
        assert!((&bl * &ones).norm() < 1e-14);
    }

    #[test]
    fn laplacian_annihilates_ones_on_random_cases() {
        for seed in 0..10 {
            let case = random_case(seed, 3 + (seed as usize % 5));
            let (b, bl) = build_laplacian(&case).unwrap();
            let ones = DVector::from_element(case.bus_count(), 1.0);
            assert!((&b * &ones).norm() < 1e-12);
            assert!((&bl * &ones).norm() < 1e-12);
            assert!((&b - b.transpose()).norm() < 1e-15);
        }
    }

    #[test]
    fn disconnected_graph_rejected() {
        let mk_bus = |id| BusSpec {
            id,
            inertia_s: 5.0,
            damping_pu: 3.0,
            gov_time_s: 4.0,
            droop_hz_per_pu: 0.25,
            load_pu: 0.1,
            gen_min_pu: 0.0,
            gen_max_pu: 1.0,
        };
        let result = GridCase::new(
            vec![mk_bus(1), mk_bus(2), mk_bus(3)],
            vec![LineSpec {
                from: 1,
                to: 2,
                susceptance_pu: 1.0,
                rating_pu: 1.0,
                in_service: true,
            }],
            ObjectiveSpec::default(),
        );
        assert_eq!(result.unwrap_err(), GridError::DisconnectedGraph);
    }

    #[test]
    fn reduction_basis_properties() {
        for r in [2usize, 3, 7, 12] {
            let e = reduction_basis(r);
            assert_eq!((e.nrows(), e.ncols()), (r, r - 1));
            let gram = e.transpose() * &e;
            assert!((gram - DMatrix::<f64>::identity(r - 1, r - 1)).norm() < 1e-12);
            let ones = DVector::from_element(r, 1.0);
            assert!((e.transpose() * ones).norm() < 1e-12);
        }
    }

    #[test]
    fn three_bus_assembles_and_certifies() {
        let case = three_bus_case();
        let plant = assemble_plant(&case).unwrap();
        assert_eq!(plant.full.state_dim(), 9);
        assert_eq!(plant.reduced.state_dim(), 8);
        assert_eq!(plant.reduced.output_dim(), 4);
        assert!(plant.lyapunov_min_eig > 0.0);
    }

    #[test]
    fn spectrum_split_on_random_cases() {
        for seed in [1u64, 5, 9] {
            let case = random_case(seed, 3 + (seed % 4) as usize);
            let plant = assemble_plant(&case).unwrap();
            let full_eigs = plant.full.a().complex_eigenvalues();
            let zero_count = full_eigs.iter().filter(|l| l.norm() <= 1e-8).count();
            assert_eq!(zero_count, 1, "exactly one zero mode in the full plant");
            let reduced_eigs = plant.reduced.a().complex_eigenvalues();
            assert!(
                reduced_eigs.iter().all(|l| l.re < -1e-8),
                "reduced plant strictly Hurwitz"
            );
        }
    }

    #[test]
    fn steady_state_frequency_formula() {
        // omega_bar = sum(p_c - p_l) / sum(D + 1/R), uniform across buses.
        for seed in [2u64, 7, 13] {
            let case = random_case(seed, 4);
            let plant = assemble_plant(&case).unwrap();
            let ssm = SteadyStateMap::new(&plant.reduced).unwrap();
            let r = case.bus_count();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let u = DVector::from_fn(r, |_, _| rng.random_range(0.0..1.0));
            let w = case.loads();
            let x = ssm.steady_state(&u, &w);
            let omega_expected = case.steady_state_frequency(&u, &w);
            let k = r - 1;
            for i in 0..r {
                assert_abs_diff_eq!(x[k + i], omega_expected, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn balanced_injections_zero_frequency() {
        let case = three_bus_case();
        let plant = assemble_plant(&case).unwrap();
        let ssm = SteadyStateMap::new(&plant.reduced).unwrap();
        let w = case.loads();
        let u = w.clone();
        let x = ssm.steady_state(&u, &w);
        let y = plant.reduced.output(&x, &u);
        assert_abs_diff_eq!(y[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn line_flows_invariant_under_reduction() {
        let case = nine_bus_case();
        let plant = assemble_plant(&case).unwrap();
        let r = case.bus_count();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta_tilde = DVector::from_fn(r - 1, |_, _| rng.random_range(-1.0..1.0));
        for alpha in [0.0, -2.5, 7.0] {
            let theta = &plant.basis * &theta_tilde + DVector::from_element(r, alpha);
            let flows_full = &plant.line_incidence * &theta;
            let flows_reduced = (&plant.line_incidence * &plant.basis) * &theta_tilde;
            assert!((flows_full - flows_reduced).norm() < 1e-12);
        }
    }

    #[test]
    fn reduced_and_full_outputs_agree() {
        let case = nine_bus_case();
        let plant = assemble_plant(&case).unwrap();
        let r = case.bus_count();
        let k = r - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x_red = DVector::from_fn(3 * r - 1, |_, _| rng.random_range(-1.0..1.0));
        let mut x_full = DVector::zeros(3 * r);
        x_full
            .rows_mut(0, r)
            .copy_from(&(&plant.basis * x_red.rows(0, k)));
        x_full.rows_mut(r, 2 * r).copy_from(&x_red.rows(k, 2 * r));
        let u = DVector::from_fn(r, |_, _| rng.random_range(0.0..1.0));
        let y_full = plant.full.output(&x_full, &u);
        let y_red = plant.reduced.output(&x_red, &u);
        assert!((y_full - y_red).norm() < 1e-12);
    }

    #[test]
    fn steady_state_outputs_match_algebraic_solve() {
        // Independent route: fix omega from the imbalance formula, back out
        // p_m from the governor equation, solve B theta from the swing
        // balance on the complement of ones, then compare C(Hu + Rw).
        let case = nine_bus_case();
        let plant = assemble_plant(&case).unwrap();
        let ssm = SteadyStateMap::new(&plant.reduced).unwrap();
        let r = case.bus_count();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let u = DVector::from_fn(r, |_, _| rng.random_range(0.0..0.6));
        let w = case.loads();

        let omega_bar = case.steady_state_frequency(&u, &w);
        let d = DVector::from_iterator(r, case.buses.iter().map(|b| b.damping_pu));
        let r_inv = DVector::from_iterator(r, case.buses.iter().map(|b| 1.0 / b.droop_hz_per_pu));
        let p_m = &u - &r_inv * omega_bar;
        let injection = &p_m - &w - &d * omega_bar;
        let e = &plant.basis;
        let theta_tilde_sys = e.transpose() * &plant.laplacian * e;
        let theta_tilde = crate::numerics::solve_linear_vec(
            &theta_tilde_sys,
            &(e.transpose() * &injection),
        )
        .unwrap();
        let flows = (&plant.line_incidence * e) * &theta_tilde;

        let x = ssm.steady_state(&u, &w);
        let y = plant.reduced.output(&x, &u);
        assert_abs_diff_eq!(y[0], omega_bar, epsilon = 1e-9);
        for l in 0..case.line_count() {
            assert_abs_diff_eq!(y[1 + l], flows[l], epsilon = 1e-8);
        }
    }

    #[test]
    fn power_balance_at_steady_state() {
        // 1^T B theta = 0 identically, and with zero frequency total
        // mechanical power equals total load.
        let case = three_bus_case();
        let plant = assemble_plant(&case).unwrap();
        let ones = DVector::from_element(3, 1.0);
        assert!((ones.transpose() * &plant.laplacian).norm() < 1e-13);

        let ssm = SteadyStateMap::new(&plant.reduced).unwrap();
        let w = case.loads();
        let u = w.clone(); // balanced: omega = 0
        let x = ssm.steady_state(&u, &w);
        let p_m_total: f64 = x.rows(2 + 3, 3).sum();
        assert_abs_diff_eq!(p_m_total, w.sum(), epsilon = 1e-9);
    }

    #[test]
    fn derate_identity_and_half() {
        let case = three_bus_case();
        let plant = assemble_plant(&case).unwrap();
        let (p1, c1) = apply_event(
            &plant,
            &case,
            &GridEvent::GeneratorDerate {
                bus: 2,
                factor: 1.0,
            },
        )
        .unwrap();
        assert_eq!(c1, case);
        assert_eq!(p1.full, plant.full);

        let (p2, c2) = apply_event(
            &plant,
            &case,
            &GridEvent::GeneratorDerate {
                bus: 2,
                factor: 0.5,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(c2.buses[1].gen_max_pu, 0.5, epsilon = 1e-15);
        assert_eq!(p2.full.a(), plant.full.a());
    }

    #[test]
    fn line_trip_removes_rank_one_contribution() {
        let case = three_bus_case();
        let plant = assemble_plant(&case).unwrap();
        let (tripped_plant, tripped_case) =
            apply_event(&plant, &case, &GridEvent::LineTrip { lines: vec![0] }).unwrap();
        let b = case.lines[0].susceptance_pu;
        let mut contribution = DMatrix::<f64>::zeros(3, 3);
        contribution[(0, 0)] = b;
        contribution[(1, 1)] = b;
        contribution[(0, 1)] = -b;
        contribution[(1, 0)] = -b;
        assert!((&plant.laplacian - &tripped_plant.laplacian - contribution).norm() < 1e-13);
        assert!(tripped_plant.line_incidence.row(0).norm() == 0.0);
        assert!(tripped_plant.lyapunov_min_eig > 0.0);
        assert!(!tripped_case.lines[0].in_service);
    }

    #[test]
    fn line_trip_must_keep_connectivity() {
        let case = three_bus_case();
        let plant = assemble_plant(&case).unwrap();
        // Tripping two of the three triangle lines isolates a bus.
        assert_eq!(
            apply_event(&plant, &case, &GridEvent::LineTrip { lines: vec![0, 1] }).unwrap_err(),
            GridError::DisconnectedGraph
        );
        assert_eq!(
            apply_event(&plant, &case, &GridEvent::LineTrip { lines: vec![9] }).unwrap_err(),
            GridError::UnknownLine(9)
        );
        assert!(matches!(
            apply_event(
                &plant,
                &case,
                &GridEvent::GeneratorDerate {
                    bus: 77,
                    factor: 0.5
                }
            )
            .unwrap_err(),
            GridError::UnknownBus(77)
        ));
    }

    #[test]
    fn agc_limit_of_the_feedback_law() {
        // With f = 0 and only omega_1 penalized, the law collapses to
        // u' = -(eps xi / 1^T (D + R^{-1}) 1) * omega_1 * 1 at any state.
        let mut case = three_bus_case();
        case.objective = ObjectiveSpec {
            quadratic: vec![],
            linear: vec![],
            xi_gen: 1.0,
            xi_line: 1.0,
            xi_freq: 250.0,
        };
        for bus in &mut case.buses {
            bus.gen_min_pu = -1e9;
            bus.gen_max_pu = 1e9;
        }
        for line in &mut case.lines {
            line.rating_pu = 1e9;
        }
        let plant = assemble_plant(&case).unwrap();
        let ssm = SteadyStateMap::new(&plant.reduced).unwrap();
        let obj = Arc::new(penalty_objective(&case, &plant).unwrap());
        let eps = 1e-3;
        let ctrl = GradientController::new(eps, ssm, obj.clone());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stiffness = case.frequency_stiffness();
        for _ in 0..5 {
            let x = DVector::from_fn(plant.reduced.state_dim(), |_, _| {
                rng.random_range(-0.5..0.5)
            });
            let u = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
            let omega_1 = x[plant.omega_offset_reduced()];
            let expected = DVector::from_element(3, -eps * 250.0 * omega_1 / stiffness);
            let got = ctrl.control_derivative(&x, &u);
            assert!(
                (got - expected).norm() < 1e-10,
                "AGC form violated at omega_1 = {omega_1}"
            );
        }
    }

    #[test]
    fn single_bus_degenerate_case() {
        // No network at all: the angle block is empty and the plant reduces
        // to local swing plus governor dynamics.
        let case = GridCase::new(
            vec![BusSpec {
                id: 1,
                inertia_s: 5.0,
                damping_pu: 3.0,
                gov_time_s: 4.0,
                droop_hz_per_pu: 0.25,
                load_pu: 0.2,
                gen_min_pu: 0.0,
                gen_max_pu: 1.0,
            }],
            vec![],
            ObjectiveSpec::default(),
        )
        .unwrap();
        let plant = assemble_plant(&case).unwrap();
        assert_eq!(plant.reduced.state_dim(), 2);
        assert!(plant.lyapunov_min_eig > 0.0);
        let ssm = SteadyStateMap::new(&plant.reduced).unwrap();
        let u = DVector::from_column_slice(&[0.5]);
        let w = DVector::from_column_slice(&[0.2]);
        let omega = case.steady_state_frequency(&u, &w);
        assert_abs_diff_eq!(ssm.steady_state(&u, &w)[0], omega, epsilon = 1e-10);
    }

    #[test]
    fn case_file_roundtrip() {
        let case = three_bus_case();
        let text = toml::to_string(&case).unwrap();
        let parsed = GridCase::from_toml_str(&text).unwrap();
        assert_eq!(parsed, case);
    }

    #[test]
    fn case_file_missing_field_is_named() {
        let text = r#"
            [[buses]]
            id = 1
            inertia_s = 5.0
            damping_pu = 3.0
            gov_time_s = 4.0
            load_pu = 0.1
            gen_min_pu = 0.0
            gen_max_pu = 1.0
        "#;
        let err = GridCase::from_toml_str(text).unwrap_err();
        match err {
            GridError::Parse(msg) => assert!(
                msg.contains("droop_hz_per_pu"),
                "error should name the missing field, got: {msg}"
            ),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn case_file_ignores_unknown_fields() {
        let mut text = toml::to_string(&three_bus_case()).unwrap();
        text.push_str("\n[extensions]\ncomment = \"ignored\"\n");
        assert!(GridCase::from_toml_str(&text).is_ok());
    }
}
