//! Runtime evaluation of the LaSalle machinery: the convex combination
//! `Z_delta = (1 - delta) V + delta W`, the gradient/tracking residuals
//! `psi`, `phi`, and the 2x2 quadratic-form matrix that bounds the Lie
//! derivative of `Z_delta`.
//!
//! Diagnostic only: nothing here feeds back into the control action.

use std::fmt;

use nalgebra::DVector;

use crate::controller::StabilityCertificate;
use crate::objective::Objective;
use crate::plant::SteadyStateMap;
use crate::sim::TrajectoryRecord;

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorError {
    DomainError(String),
}

impl fmt::Display for MonitorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MonitorError::DomainError(msg) => write!(f, "domain error: {msg}"),
        }
    }
}

impl std::error::Error for MonitorError {}

/// Snapshot of the LaSalle channels at one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaSalleState {
    /// Convex combination coefficient at which `z_value` was formed.
    pub delta: f64,
    /// `V(u) = Phi(Hu + Rw, u)`: cost at the steady state the current input
    /// would reach.
    pub v_value: f64,
    /// `W(u, x) = (x - Hu - Rw)^T P (x - Hu - Rw)`: Lyapunov tracking energy.
    pub w_value: f64,
    /// `(1 - delta) V + delta W`.
    pub z_value: f64,
    /// `|H~^T grad Phi(x, u)|`: first-order optimality residual.
    pub psi_norm: f64,
    /// `|x - Hu - Rw|`: steady-state tracking error.
    pub phi_norm: f64,
}

/// Evaluate `V`, `W`, `Z` (at the certificate's `delta*`) and the residual
/// norms at one closed-loop sample.
pub fn evaluate_lasalle(
    cert: &StabilityCertificate,
    ssm: &SteadyStateMap,
    obj: &dyn Objective,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> LaSalleState {
    let x_ss = ssm.steady_state(u, w);
    let phi = x - &x_ss;
    let v_value = obj.value(&x_ss, u);
    let w_value = (phi.transpose() * cert.p_matrix() * &phi)[(0, 0)];
    let psi_norm = (ssm.h_tilde_t() * obj.gradient(x, u)).norm();
    let delta = cert.delta_star();
    LaSalleState {
        delta,
        v_value,
        w_value,
        z_value: (1.0 - delta) * v_value + delta * w_value,
        psi_norm,
        phi_norm: phi.norm(),
    }
}

/// Symmetric 2x2 matrix bounding the Lie derivative of `Z_delta` through
/// `d/dt Z <= [|psi| |phi|] Lambda [|psi|; |phi|]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaMatrix {
    diag_psi: f64,
    off_diag: f64,
    diag_phi: f64,
}

impl LambdaMatrix {
    pub fn entries(&self) -> [[f64; 2]; 2] {
        [
            [self.diag_psi, self.off_diag],
            [self.off_diag, self.diag_phi],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.diag_psi * self.diag_phi - self.off_diag * self.off_diag
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let tr = self.diag_psi + self.diag_phi;
        let disc = (self.diag_psi - self.diag_phi).powi(2) + 4.0 * self.off_diag * self.off_diag;
        0.5 * (tr + disc.sqrt())
    }

    pub fn is_negative_definite(&self) -> bool {
        self.max_eigenvalue() < 0.0
    }

    /// `[|psi| |phi|] Lambda [|psi|; |phi|]`.
    pub fn quadratic_form(&self, psi_norm: f64, phi_norm: f64) -> f64 {
        self.diag_psi * psi_norm * psi_norm
            + 2.0 * self.off_diag * psi_norm * phi_norm
            + self.diag_phi * phi_norm * phi_norm
    }
}

/// Assemble the Lie-derivative bound matrix
/// `[[-eps (1-delta), eps (l (1-delta) + delta beta) / 2], [sym, -delta/2]]`.
pub fn lambda_matrix(
    epsilon: f64,
    delta: f64,
    ell: f64,
    beta: f64,
) -> Result<LambdaMatrix, MonitorError> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(MonitorError::DomainError(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if epsilon <= 0.0 || ell <= 0.0 || beta <= 0.0 {
        return Err(MonitorError::DomainError(
            "epsilon, ell and beta must be positive".into(),
        ));
    }
    Ok(LambdaMatrix {
        diag_psi: -epsilon * (1.0 - delta),
        off_diag: 0.5 * epsilon * (ell * (1.0 - delta) + delta * beta),
        diag_phi: -0.5 * delta,
    })
}

/// Result of scanning a trajectory for violations of `Z_delta` monotonicity.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub pass: bool,
    /// Largest positive increment of `Z_delta` between consecutive samples.
    pub max_increment: f64,
    /// Tolerance that applied at the worst sample.
    pub allowed_at_worst: f64,
    pub worst_time: Option<f64>,
    pub samples: usize,
}

/// Check that `Z_delta` is non-increasing along a recorded trajectory, up to
/// a per-step slack of `slack * (1 + |Z|)` that absorbs discretization error.
///
/// `Z_delta` is reformed from the recorded `V` and `W` channels, so any
/// `delta` in `(0, 1)` can be checked, not just the `delta*` the record was
/// sampled with. Expects the record to be sampled at the simulation step
/// (no decimation) for the per-step tolerance to be meaningful.
pub fn check_monotone(
    record: &TrajectoryRecord,
    delta: f64,
    slack: f64,
) -> Result<MonotonicityReport, MonitorError> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(MonitorError::DomainError(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let z = |s: &LaSalleState| (1.0 - delta) * s.v_value + delta * s.w_value;
    let mut report = MonotonicityReport {
        pass: true,
        max_increment: 0.0,
        allowed_at_worst: slack,
        worst_time: None,
        samples: record.lasalle.len(),
    };
    for k in 1..record.lasalle.len() {
        let z_prev = z(&record.lasalle[k - 1]);
        let z_next = z(&record.lasalle[k]);
        let increment = z_next - z_prev;
        let allowed = slack * (1.0 + z_prev.abs());
        if increment > report.max_increment {
            report.max_increment = increment;
            report.allowed_at_worst = allowed;
            report.worst_time = Some(record.times[k]);
        }
        if increment > allowed {
            report.pass = false;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::build_certificate;
    use crate::objective::QuadraticObjective;
    use crate::plant::LtiPlant;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn scalar_setup() -> (StabilityCertificate, SteadyStateMap, QuadraticObjective) {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let ssm = SteadyStateMap::new(&plant).unwrap();
        let obj = QuadraticObjective::diagonal(&[1.0], &[1.0]);
        let cert = build_certificate(&plant, &ssm, obj.exact_x_lipschitz(&ssm)).unwrap();
        (cert, ssm, obj)
    }

    #[test]
    fn lasalle_zero_at_equilibrium() {
        let (cert, ssm, obj) = scalar_setup();
        // x = Hu + Rw with grad in the kernel: psi = 0, phi = 0.
        let zero = DVector::from_column_slice(&[0.0]);
        let state = evaluate_lasalle(&cert, &ssm, &obj, &zero, &zero, &zero);
        assert_eq!(state.psi_norm, 0.0);
        assert_eq!(state.phi_norm, 0.0);
        assert_eq!(state.w_value, 0.0);
    }

    #[test]
    fn lasalle_on_manifold_has_zero_w() {
        let (cert, ssm, obj) = scalar_setup();
        let u = DVector::from_column_slice(&[0.8]);
        let w = DVector::from_column_slice(&[0.0]);
        let x = ssm.steady_state(&u, &w);
        let state = evaluate_lasalle(&cert, &ssm, &obj, &x, &u, &w);
        assert_abs_diff_eq!(state.w_value, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            state.z_value,
            (1.0 - state.delta) * state.v_value,
            epsilon = 1e-14
        );
    }

    #[test]
    fn lasalle_tracking_energy() {
        // Scalar case, x = 1, u = 0, w = 0, P = 0.5: phi = 1, W = 0.5.
        let (cert, ssm, obj) = scalar_setup();
        let x = DVector::from_column_slice(&[1.0]);
        let zero = DVector::from_column_slice(&[0.0]);
        let state = evaluate_lasalle(&cert, &ssm, &obj, &x, &zero, &zero);
        assert_abs_diff_eq!(state.phi_norm, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(state.w_value, 0.5, epsilon = 1e-14);
        let z = (1.0 - state.delta) * state.v_value + state.delta * state.w_value;
        assert_abs_diff_eq!(state.z_value, z, epsilon = 1e-15);
    }

    #[test]
    fn lambda_boundary_case_is_singular() {
        // eps = eps* = 1, delta = delta* = 2/3, l = 1, beta = 0.5 gives
        // [[-1/3, 1/3], [1/3, -1/3]].
        let lambda = lambda_matrix(1.0, 2.0 / 3.0, 1.0, 0.5).unwrap();
        let e = lambda.entries();
        assert_abs_diff_eq!(e[0][0], -1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[0][1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[1][1], -1.0 / 3.0, epsilon = 1e-15);
        assert!(lambda.determinant().abs() <= 1e-12);
        assert!(!lambda.is_negative_definite());
    }

    #[test]
    fn lambda_strictly_negative_below_star() {
        let (ell, beta) = (1.0, 0.5);
        let delta_star = ell / (ell + beta);
        let lambda = lambda_matrix(0.5, delta_star, ell, beta).unwrap();
        assert!(lambda.max_eigenvalue() < 0.0);
        assert!(lambda.quadratic_form(0.7, 1.3) < 0.0);
    }

    #[test]
    fn lambda_determinant_zero_on_boundary_curve() {
        // det = 0 exactly when eps = 2 d (1-d) / (l(1-d) + beta d)^2.
        for delta in [0.2f64, 0.5, 0.8] {
            for (ell, beta) in [(1.0f64, 0.5f64), (3.0, 2.0), (48.0, 3.1)] {
                let eps = 2.0 * delta * (1.0 - delta)
                    / (ell * (1.0 - delta) + beta * delta).powi(2);
                let lambda = lambda_matrix(eps, delta, ell, beta).unwrap();
                let scale = lambda.entries()[0][1].abs().max(1.0);
                assert!(
                    lambda.determinant().abs() <= 1e-12 * scale * scale,
                    "det {} at delta={delta}",
                    lambda.determinant()
                );
            }
        }
    }

    #[test]
    fn lambda_small_delta_limit() {
        let lambda = lambda_matrix(1.0, 1e-9, 1.0, 1.0).unwrap();
        assert!(lambda.entries()[1][1].abs() < 1e-9);
    }

    #[test]
    fn lambda_rejects_bad_delta() {
        assert!(lambda_matrix(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(lambda_matrix(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(lambda_matrix(1.0, 1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn monotone_check_flat_trajectory() {
        let flat = LaSalleState {
            delta: 0.5,
            v_value: 2.0,
            w_value: 0.0,
            z_value: 1.0,
            psi_norm: 0.0,
            phi_norm: 0.0,
        };
        let record = TrajectoryRecord::for_test(vec![0.0, 0.1, 0.2], vec![flat; 3]);
        let report = check_monotone(&record, 0.5, 1e-6).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_increment, 0.0);
    }

    #[test]
    fn monotone_check_flags_increase() {
        let mk = |v: f64| LaSalleState {
            delta: 0.5,
            v_value: v,
            w_value: 0.0,
            z_value: 0.5 * v,
            psi_norm: 0.0,
            phi_norm: 0.0,
        };
        let record = TrajectoryRecord::for_test(vec![0.0, 0.1], vec![mk(1.0), mk(2.0)]);
        let report = check_monotone(&record, 0.5, 1e-6).unwrap();
        assert!(!report.pass);
        assert_abs_diff_eq!(report.max_increment, 0.5, epsilon = 1e-15);
        assert_eq!(report.worst_time, Some(0.1));
    }
}
