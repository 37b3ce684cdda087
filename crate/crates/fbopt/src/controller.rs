//! The gradient feedback law `u' = -eps H~^T grad Phi(x, u)` and the
//! certificate for the largest gain under which the closed loop provably
//! converges.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::numerics;
use crate::objective::Objective;
use crate::plant::{certify_stability, LtiPlant, PlantError, SteadyStateMap};

/// Everything the convergence guarantee needs:
/// `beta = |P H|`, `epsilon* = 1 / (2 l beta)`, `delta* = l / (l + beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    p_matrix: DMatrix<f64>,
    p_min_eigenvalue: f64,
    beta: f64,
    ell: f64,
    epsilon_star: f64,
    delta_star: f64,
}

impl StabilityCertificate {
    pub fn p_matrix(&self) -> &DMatrix<f64> {
        &self.p_matrix
    }

    pub fn p_min_eigenvalue(&self) -> f64 {
        self.p_min_eigenvalue
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn epsilon_star(&self) -> f64 {
        self.epsilon_star
    }

    pub fn delta_star(&self) -> f64 {
        self.delta_star
    }
}

/// Certify the plant and assemble the gain bound for a given Lipschitz
/// constant `ell` of the objective.
pub fn build_certificate(
    plant: &LtiPlant,
    ssm: &SteadyStateMap,
    ell: f64,
) -> Result<StabilityCertificate, PlantError> {
    let (p_matrix, p_min_eigenvalue) = certify_stability(plant)?;
    certificate_from_lyapunov(p_matrix, p_min_eigenvalue, ssm, ell)
}

/// Assemble the certificate from an already-solved Lyapunov matrix (plants
/// cache their certification; events re-solve only when matrices change).
pub fn certificate_from_lyapunov(
    p_matrix: DMatrix<f64>,
    p_min_eigenvalue: f64,
    ssm: &SteadyStateMap,
    ell: f64,
) -> Result<StabilityCertificate, PlantError> {
    assert!(ell > 0.0, "Lipschitz constant must be positive");
    let ph = &p_matrix * ssm.h();
    let beta = numerics::spectral_norm(&ph)?;
    Ok(StabilityCertificate {
        p_matrix,
        p_min_eigenvalue,
        beta,
        ell,
        epsilon_star: 1.0 / (2.0 * ell * beta),
        delta_star: ell / (ell + beta),
    })
}

/// Integrates `u' = -eps H~^T grad Phi(x, u)` against measured state.
///
/// The steady-state map stored here is the controller's *model*; after a
/// topology event it may deliberately be left stale while the true plant
/// moves on.
#[derive(Clone)]
pub struct GradientController {
    epsilon: f64,
    model: SteadyStateMap,
    objective: Arc<dyn Objective>,
}

impl GradientController {
    pub fn new(epsilon: f64, model: SteadyStateMap, objective: Arc<dyn Objective>) -> Self {
        assert!(epsilon > 0.0, "controller gain must be positive");
        GradientController {
            epsilon,
            model,
            objective,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        assert!(epsilon > 0.0);
        self.epsilon = epsilon;
    }

    pub fn model(&self) -> &SteadyStateMap {
        &self.model
    }

    pub fn set_model(&mut self, model: SteadyStateMap) {
        self.model = model;
    }

    pub fn objective(&self) -> &Arc<dyn Objective> {
        &self.objective
    }

    pub fn set_objective(&mut self, objective: Arc<dyn Objective>) {
        self.objective = objective;
    }

    /// `u' = -eps (H^T grad_x Phi + grad_u Phi)`; zero exactly at points that
    /// satisfy the first-order optimality conditions.
    pub fn control_derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let g = self.objective.gradient(x, u);
        -(self.model.h_tilde_t() * g) * self.epsilon
    }
}

/// `|H~^T grad Phi(x, u)|`: zero iff `(x, u)` with `x = Hu + Rw` is a critical
/// point of the steady-state problem.
pub fn optimality_residual(
    ssm: &SteadyStateMap,
    obj: &dyn Objective,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    (ssm.h_tilde_t() * obj.gradient(x, u)).norm()
}
