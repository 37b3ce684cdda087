//! Command-line front end: certify a case's gain bound, simulate a scenario,
//! sweep gain multipliers, or solve the instantaneous steady-state problem.
//!
//! Exit codes: 0 success, 1 usage or parse error, 2 numerical failure,
//! 3 divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use fbopt::controller::certificate_from_lyapunov;
use fbopt::objective::{lipschitz_bound_analytic, lipschitz_bound_sampled};
use fbopt::oracle::{self, OracleSettings};
use fbopt::plant::{PlantError, SteadyStateMap};
use fbopt::powergrid::{self, GridCase, GridError};
use fbopt::sim::{self, ClosedLoop, EpsilonPolicy, Scenario, SimError, SweepConfig};

#[derive(Parser)]
#[command(
    name = "fbopt",
    version,
    about = "Feedback optimization of stable LTI plants: certify the gain bound, \
             simulate the closed loop, sweep gains, and solve steady-state references"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify a grid case: Lyapunov matrix, beta, Lipschitz constants, and
    /// the gain bound epsilon* = 1 / (2 ell beta).
    Certify {
        /// Grid case file (TOML).
        #[arg(long)]
        case: PathBuf,
        /// Override the analytic Lipschitz constant used in the certificate.
        #[arg(long)]
        ell: Option<f64>,
        /// Probe count for the sampled Lipschitz estimate.
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario against a case; writes the trajectory CSV and prints a
    /// summary.
    Simulate {
        #[arg(long)]
        case: PathBuf,
        /// Scenario file (TOML).
        #[arg(long)]
        scenario: PathBuf,
        /// Trajectory CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run at this multiple of epsilon* instead of the scenario's policy.
        #[arg(long)]
        epsilon_multiplier: Option<f64>,
        /// Permit gains at or above the certified bound.
        #[arg(long)]
        allow_unstable_epsilon: bool,
        /// Exit 0 even when the divergence guard truncates the run.
        #[arg(long)]
        allow_divergence: bool,
    },
    /// Classify runs at several multiples of epsilon* and tabulate them.
    Sweep {
        #[arg(long)]
        case: PathBuf,
        /// Comma-separated positive multipliers, e.g. "0.5,1,2,5".
        #[arg(long)]
        multipliers: String,
        /// Horizon per run in seconds.
        #[arg(long, default_value_t = 18000.0)]
        horizon: f64,
        /// Integration step in seconds.
        #[arg(long, default_value_t = 0.1)]
        step_s: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sweep table CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the instantaneous steady-state problem for the case loads, or
    /// the whole reference series of a scenario.
    Oracle {
        #[arg(long)]
        case: PathBuf,
        /// Optional scenario whose load segments define the series.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Output path (TOML for a single solve, CSV for a series).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for interface uniformity; the oracle is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum CliError {
    Usage(String),
    Numerical(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Divergence(m) => m,
        }
    }
}

fn grid_error(e: GridError) -> CliError {
    match e {
        GridError::Parse(_)
        | GridError::InvalidCase(_)
        | GridError::UnknownBus(_)
        | GridError::UnknownLine(_)
        | GridError::DisconnectedGraph => CliError::Usage(e.to_string()),
        GridError::Plant(_) | GridError::Objective(_) => CliError::Numerical(e.to_string()),
    }
}

fn plant_error(e: PlantError) -> CliError {
    CliError::Numerical(e.to_string())
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::BadScenario(_) => CliError::Usage(e.to_string()),
        SimError::Grid(g) => grid_error(g),
        SimError::Plant(_) | SimError::Objective(_) | SimError::Oracle(_) => {
            CliError::Numerical(e.to_string())
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Certify {
            case,
            ell,
            probes,
            seed,
            out,
        } => cmd_certify(&case, ell, probes, seed, out.as_deref()),
        Command::Simulate {
            case,
            scenario,
            out,
            seed,
            epsilon_multiplier,
            allow_unstable_epsilon,
            allow_divergence,
        } => cmd_simulate(
            &case,
            &scenario,
            &out,
            seed,
            epsilon_multiplier,
            allow_unstable_epsilon,
            allow_divergence,
        ),
        Command::Sweep {
            case,
            multipliers,
            horizon,
            step_s,
            seed,
            out,
        } => cmd_sweep(&case, &multipliers, horizon, step_s, seed, &out),
        Command::Oracle {
            case,
            scenario,
            out,
            seed: _,
        } => cmd_oracle(&case, scenario.as_deref(), out.as_deref()),
    }
}

#[derive(Serialize)]
struct CertifyReport {
    format_version: u32,
    n: usize,
    p: usize,
    q: usize,
    m: usize,
    p_min_eigenvalue: f64,
    beta: f64,
    ell_analytic: f64,
    ell_effective: f64,
    ell_sampled: f64,
    epsilon_star: f64,
    delta_star: f64,
    p_checksum_sha256: String,
    lipschitz_probes: usize,
    seed: u64,
}

fn p_checksum(p: &fbopt::nalgebra::DMatrix<f64>) -> String {
    let mut hasher = Sha256::new();
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            hasher.update(p[(i, j)].to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_certify(
    case_path: &Path,
    ell_override: Option<f64>,
    probes: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let case = GridCase::from_toml_file(case_path).map_err(grid_error)?;
    let plant = powergrid::assemble_plant(&case).map_err(grid_error)?;
    let ssm = SteadyStateMap::new(&plant.reduced).map_err(plant_error)?;
    let objective = powergrid::penalty_objective(&case, &plant).map_err(grid_error)?;
    let ell_analytic =
        lipschitz_bound_analytic(&objective, &ssm).map_err(|e| CliError::Numerical(e.to_string()))?;
    let ell_effective = match ell_override {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(v) => return Err(CliError::Usage(format!("--ell must be positive, got {v}"))),
        None => ell_analytic,
    };
    let cert = certificate_from_lyapunov(
        plant.lyapunov_p.clone(),
        plant.lyapunov_min_eig,
        &ssm,
        ell_effective,
    )
    .map_err(plant_error)?;
    let region = powergrid::default_probe_region(&case, &plant).map_err(grid_error)?;
    let ell_sampled = lipschitz_bound_sampled(&objective, &ssm, probes.max(1), &region, seed);

    let report = CertifyReport {
        format_version: 1,
        n: plant.reduced.state_dim(),
        p: plant.reduced.input_dim(),
        q: plant.reduced.disturbance_dim(),
        m: plant.reduced.output_dim(),
        p_min_eigenvalue: cert.p_min_eigenvalue(),
        beta: cert.beta(),
        ell_analytic,
        ell_effective,
        ell_sampled,
        epsilon_star: cert.epsilon_star(),
        delta_star: cert.delta_star(),
        p_checksum_sha256: p_checksum(cert.p_matrix()),
        lipschitz_probes: probes.max(1),
        seed,
    };
    let text = toml::to_string(&report)
        .map_err(|e| CliError::Numerical(format!("report serialization: {e}")))?;
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_error(path, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_simulate(
    case_path: &Path,
    scenario_path: &Path,
    out: &Path,
    seed: Option<u64>,
    epsilon_multiplier: Option<f64>,
    allow_unstable_epsilon: bool,
    allow_divergence: bool,
) -> Result<(), CliError> {
    let case = GridCase::from_toml_file(case_path).map_err(grid_error)?;
    let mut scenario = Scenario::from_toml_file(scenario_path).map_err(sim_error)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    if let Some(k) = epsilon_multiplier {
        if !(k > 0.0 && k.is_finite()) {
            return Err(CliError::Usage(format!(
                "--epsilon-multiplier must be positive, got {k}"
            )));
        }
        scenario.epsilon = EpsilonPolicy::FractionOfStar(k);
    }
    let loop_ = ClosedLoop::for_grid(&case, scenario.epsilon).map_err(sim_error)?;
    let epsilon_star = loop_.certificate.epsilon_star();
    if loop_.epsilon() >= epsilon_star && !allow_unstable_epsilon {
        return Err(CliError::Usage(format!(
            "refusing to run at epsilon = {:.6e} >= epsilon* = {:.6e}: convergence is only \
             certified for gains below epsilon*; pass --allow-unstable-epsilon to override",
            loop_.epsilon(),
            epsilon_star
        )));
    }

    let record = sim::run(&loop_, &scenario).map_err(sim_error)?;
    let mut csv = Vec::new();
    sim::write_trajectory_csv(&record, &mut csv)
        .map_err(|e| CliError::Numerical(format!("csv serialization: {e}")))?;
    fs::write(out, csv).map_err(|e| io_error(out, e))?;

    let summary = sim::summarize(&loop_, &scenario, &record);
    let text = toml::to_string(&summary)
        .map_err(|e| CliError::Numerical(format!("summary serialization: {e}")))?;
    print!("{text}");

    match record.divergence {
        Some(t) if !allow_divergence => Err(CliError::Divergence(format!(
            "trajectory diverged at t = {t}; record truncated (pass --allow-divergence to exit 0)"
        ))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct SweepSummary {
    format_version: u32,
    epsilon_star: f64,
    rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    first_unstable_multiplier: Option<f64>,
}

fn cmd_sweep(
    case_path: &Path,
    multipliers: &str,
    horizon: f64,
    step_s: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let case = GridCase::from_toml_file(case_path).map_err(grid_error)?;
    let mut parsed: Vec<f64> = Vec::new();
    for token in multipliers.split(',').filter(|t| !t.trim().is_empty()) {
        let value: f64 = token
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad multiplier '{token}'")))?;
        if !(value > 0.0 && value.is_finite()) {
            return Err(CliError::Usage(format!(
                "multipliers must be positive, got {value}"
            )));
        }
        parsed.push(value);
    }
    parsed.sort_by(|a, b| a.partial_cmp(b).expect("finite multipliers"));

    let loop_ = ClosedLoop::for_grid(&case, EpsilonPolicy::FractionOfStar(0.5)).map_err(sim_error)?;
    let config = SweepConfig {
        horizon,
        step: step_s,
        perturbation: 0.08,
        seed,
        residual_tol: 1e-5,
    };
    let rows = sim::sweep_epsilon(&loop_, &parsed, &config).map_err(sim_error)?;

    let mut csv = Vec::new();
    sim::write_sweep_csv(&rows, &mut csv)
        .map_err(|e| CliError::Numerical(format!("csv serialization: {e}")))?;
    fs::write(out, csv).map_err(|e| io_error(out, e))?;

    let summary = SweepSummary {
        format_version: 1,
        epsilon_star: loop_.certificate.epsilon_star(),
        rows: rows.len(),
        first_unstable_multiplier: sim::first_unstable(&rows),
    };
    let text = toml::to_string(&summary)
        .map_err(|e| CliError::Numerical(format!("summary serialization: {e}")))?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    format_version: u32,
    u_star: Vec<f64>,
    cost: f64,
    residual: f64,
    iterations: usize,
}

fn cmd_oracle(
    case_path: &Path,
    scenario_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let case = GridCase::from_toml_file(case_path).map_err(grid_error)?;
    let plant = powergrid::assemble_plant(&case).map_err(grid_error)?;
    let ssm = SteadyStateMap::new(&plant.reduced).map_err(plant_error)?;
    let objective = powergrid::penalty_objective(&case, &plant).map_err(grid_error)?;
    let settings = OracleSettings::default();
    let u0 = case.loads();

    match scenario_path {
        None => {
            let solution =
                oracle::solve_instantaneous(&objective, &ssm, &case.loads(), &u0, &settings)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
            let report = OracleReport {
                format_version: 1,
                u_star: solution.u_star.iter().copied().collect(),
                cost: solution.cost,
                residual: solution.residual,
                iterations: solution.iterations,
            };
            let text = toml::to_string(&report)
                .map_err(|e| CliError::Numerical(format!("report serialization: {e}")))?;
            match out {
                Some(path) => fs::write(path, text).map_err(|e| io_error(path, e))?,
                None => print!("{text}"),
            }
        }
        Some(path) => {
            let scenario = Scenario::from_toml_file(path).map_err(sim_error)?;
            let series =
                oracle::reference_series(&objective, &ssm, &scenario, &case.loads(), &u0, &settings)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
            let mut text = String::from("t,phi_star\n");
            for (t, cost) in series {
                text.push_str(&format!("{t},{cost}\n"));
            }
            match out {
                Some(path) => fs::write(path, text).map_err(|e| io_error(path, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
