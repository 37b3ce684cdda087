//! Cost functions over plant state and input: the generic differentiable
//! objective interface, the soft-constrained penalty objective used for the
//! grid application, and estimators for the Lipschitz constant `l` that the
//! gain certificate needs.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::plant::SteadyStateMap;

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    DimensionMismatch(String),
    /// The analytic Lipschitz formula only covers `D = 0` with input-only
    /// economic cost; anything else must use the sampled estimator.
    UnsupportedObjective(&'static str),
    InvalidSpec(String),
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveError::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            ObjectiveError::UnsupportedObjective(msg) => write!(f, "unsupported objective: {msg}"),
            ObjectiveError::InvalidSpec(msg) => write!(f, "invalid objective: {msg}"),
        }
    }
}

impl std::error::Error for ObjectiveError {}

/// A differentiable cost `Phi(x, u)`.
///
/// Evaluators must be pure and reentrant; sweep workers may call them from
/// several threads at once.
pub trait Objective: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    /// Stacked gradient `(grad_x Phi, grad_u Phi)` of length `n + p`.
    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// User assertion; enables global-optimality claims for the oracle.
    fn is_convex(&self) -> bool {
        false
    }
}

/// Split a stacked gradient into its state and input parts.
pub fn split_gradient(g: &DVector<f64>, n: usize) -> (DVector<f64>, DVector<f64>) {
    (g.rows(0, n).into(), g.rows(n, g.len() - n).into())
}

/// Central finite differences of `Phi`, stacked like [`Objective::gradient`].
/// This is the independent oracle for gradient checks.
pub fn finite_difference_gradient(
    obj: &dyn Objective,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let n = x.len();
    let p = u.len();
    let mut g = DVector::zeros(n + p);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..n {
        xp[i] += h;
        xm[i] -= h;
        g[i] = (obj.value(&xp, u) - obj.value(&xm, u)) / (2.0 * h);
        xp[i] = x[i];
        xm[i] = x[i];
    }
    let mut up = u.clone();
    let mut um = u.clone();
    for j in 0..p {
        up[j] += h;
        um[j] -= h;
        g[n + j] = (obj.value(x, &up) - obj.value(x, &um)) / (2.0 * h);
        up[j] = u[j];
        um[j] = u[j];
    }
    g
}

/// Unilateral quadratic penalty `1/2 sum_i xi_i max(0, w_i)^2`.
///
/// Continuously differentiable in `w`, which is what lets the soft-constrained
/// gradient be used as a feedback law.
pub fn penalty_value(w: &DVector<f64>, xi: &DVector<f64>) -> Result<f64, ObjectiveError> {
    if w.len() != xi.len() {
        return Err(ObjectiveError::DimensionMismatch(format!(
            "penalty argument has {} entries but {} weights were given",
            w.len(),
            xi.len()
        )));
    }
    debug_assert!(xi.iter().all(|&x| x > 0.0), "penalty weights must be positive");
    Ok(0.5
        * w.iter()
            .zip(xi.iter())
            .map(|(&wi, &xii)| xii * wi.max(0.0) * wi.max(0.0))
            .sum::<f64>())
}

/// Economic cost plus soft box constraints on inputs and outputs:
///
/// `Phi(x, u) = f(u) + rho([u; y] - [u_hi; y_hi]) + rho([u_lo; y_lo] - [u; y])`
///
/// with `y = Cx + Du` and `f(u) = 1/2 sum q_i u_i^2 + sum c_i u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyObjective {
    cost_quadratic: DVector<f64>,
    cost_linear: DVector<f64>,
    u_lo: DVector<f64>,
    u_hi: DVector<f64>,
    y_lo: DVector<f64>,
    y_hi: DVector<f64>,
    xi_u: DVector<f64>,
    xi_y: DVector<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl PenaltyObjective {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cost_quadratic: DVector<f64>,
        cost_linear: DVector<f64>,
        u_lo: DVector<f64>,
        u_hi: DVector<f64>,
        y_lo: DVector<f64>,
        y_hi: DVector<f64>,
        xi_u: DVector<f64>,
        xi_y: DVector<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self, ObjectiveError> {
        let p = u_lo.len();
        let m = y_lo.len();
        for (len, name) in [
            (cost_quadratic.len(), "quadratic cost coefficients"),
            (cost_linear.len(), "linear cost coefficients"),
            (u_hi.len(), "upper input bounds"),
            (xi_u.len(), "input penalty weights"),
        ] {
            if len != p {
                return Err(ObjectiveError::DimensionMismatch(format!(
                    "{name}: expected {p} entries, got {len}"
                )));
            }
        }
        for (len, name) in [(y_hi.len(), "upper output bounds"), (xi_y.len(), "output penalty weights")] {
            if len != m {
                return Err(ObjectiveError::DimensionMismatch(format!(
                    "{name}: expected {m} entries, got {len}"
                )));
            }
        }
        if c.nrows() != m {
            return Err(ObjectiveError::DimensionMismatch(format!(
                "output map C: expected {m} rows, got {}",
                c.nrows()
            )));
        }
        if d.nrows() != m || d.ncols() != p {
            return Err(ObjectiveError::DimensionMismatch(format!(
                "feedthrough D: expected {m}x{p}, got {}x{}",
                d.nrows(),
                d.ncols()
            )));
        }
        if u_lo.iter().zip(u_hi.iter()).any(|(lo, hi)| lo > hi) {
            return Err(ObjectiveError::InvalidSpec(
                "input bounds must satisfy u_lo <= u_hi componentwise".into(),
            ));
        }
        if y_lo.iter().zip(y_hi.iter()).any(|(lo, hi)| lo > hi) {
            return Err(ObjectiveError::InvalidSpec(
                "output bounds must satisfy y_lo <= y_hi componentwise".into(),
            ));
        }
        if xi_u.iter().chain(xi_y.iter()).any(|&x| x <= 0.0) {
            return Err(ObjectiveError::InvalidSpec(
                "penalty weights must be strictly positive".into(),
            ));
        }
        Ok(PenaltyObjective {
            cost_quadratic,
            cost_linear,
            u_lo,
            u_hi,
            y_lo,
            y_hi,
            xi_u,
            xi_y,
            c,
            d,
        })
    }

    pub fn output_map(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn feedthrough(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn xi_y(&self) -> &DVector<f64> {
        &self.xi_y
    }

    pub fn u_lo(&self) -> &DVector<f64> {
        &self.u_lo
    }

    pub fn u_hi(&self) -> &DVector<f64> {
        &self.u_hi
    }

    pub fn y_lo(&self) -> &DVector<f64> {
        &self.y_lo
    }

    pub fn y_hi(&self) -> &DVector<f64> {
        &self.y_hi
    }

    pub fn cost_quadratic(&self) -> &DVector<f64> {
        &self.cost_quadratic
    }

    pub fn cost_linear(&self) -> &DVector<f64> {
        &self.cost_linear
    }

    /// Derate the upper input bound at one coordinate (generator capacity loss).
    pub fn scale_u_hi(&mut self, index: usize, factor: f64) {
        self.u_hi[index] *= factor;
    }

    /// Replace the output map after a plant topology change.
    pub fn set_output_map(&mut self, c: DMatrix<f64>) {
        assert_eq!(c.nrows(), self.y_lo.len());
        self.c = c;
    }

    fn economic_cost(&self, u: &DVector<f64>) -> f64 {
        u.iter()
            .enumerate()
            .map(|(i, &ui)| 0.5 * self.cost_quadratic[i] * ui * ui + self.cost_linear[i] * ui)
            .sum()
    }

    /// Stacked gradient `(grad_x Phi, grad_u Phi)`.
    ///
    /// The active upper violations contribute `+xi max(0, . )`, the lower ones
    /// `-xi max(0, . )`; both are mapped back through `C` (and `D` when
    /// nonzero).
    pub fn augmented_gradient(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, ObjectiveError> {
        let n = self.c.ncols();
        let p = self.u_lo.len();
        if x.len() != n || u.len() != p {
            return Err(ObjectiveError::DimensionMismatch(format!(
                "expected state {n} / input {p}, got {} / {}",
                x.len(),
                u.len()
            )));
        }
        let y = &self.c * x + &self.d * u;
        // xi_y-weighted net violation force in output space
        let y_force = DVector::from_fn(y.len(), |i, _| {
            self.xi_y[i] * ((y[i] - self.y_hi[i]).max(0.0) - (self.y_lo[i] - y[i]).max(0.0))
        });
        let u_force = DVector::from_fn(p, |i, _| {
            self.xi_u[i] * ((u[i] - self.u_hi[i]).max(0.0) - (self.u_lo[i] - u[i]).max(0.0))
        });
        let grad_x = self.c.transpose() * &y_force;
        let grad_u = DVector::from_fn(p, |i, _| {
            self.cost_quadratic[i] * u[i] + self.cost_linear[i] + u_force[i]
        }) + self.d.transpose() * &y_force;

        let mut g = DVector::zeros(n + p);
        g.rows_mut(0, n).copy_from(&grad_x);
        g.rows_mut(n, p).copy_from(&grad_u);
        Ok(g)
    }
}

impl Objective for PenaltyObjective {
    fn state_dim(&self) -> usize {
        self.c.ncols()
    }

    fn input_dim(&self) -> usize {
        self.u_lo.len()
    }

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let y = &self.c * x + &self.d * u;
        let p = u.len();
        let m = y.len();
        let mut upper = DVector::zeros(p + m);
        let mut lower = DVector::zeros(p + m);
        for i in 0..p {
            upper[i] = u[i] - self.u_hi[i];
            lower[i] = self.u_lo[i] - u[i];
        }
        for i in 0..m {
            upper[p + i] = y[i] - self.y_hi[i];
            lower[p + i] = self.y_lo[i] - y[i];
        }
        let xi = DVector::from_fn(p + m, |i, _| {
            if i < p {
                self.xi_u[i]
            } else {
                self.xi_y[i - p]
            }
        });
        self.economic_cost(u)
            + penalty_value(&upper, &xi).expect("internal penalty dimensions")
            + penalty_value(&lower, &xi).expect("internal penalty dimensions")
    }

    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.augmented_gradient(x, u)
            .expect("state/input dimensions must match the objective")
    }

    fn is_convex(&self) -> bool {
        // Convex quadratic cost plus convex penalties.
        self.cost_quadratic.iter().all(|&q| q >= 0.0)
    }
}

/// General quadratic cost
/// `Phi(x, u) = 1/2 x^T Qxx x + 1/2 u^T Quu u + u^T Qux x + gx^T x + gu^T u`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    qxx: DMatrix<f64>,
    quu: DMatrix<f64>,
    qux: DMatrix<f64>,
    lin_x: DVector<f64>,
    lin_u: DVector<f64>,
    convex: bool,
}

impl QuadraticObjective {
    pub fn new(
        qxx: DMatrix<f64>,
        quu: DMatrix<f64>,
        qux: DMatrix<f64>,
        lin_x: DVector<f64>,
        lin_u: DVector<f64>,
        convex: bool,
    ) -> Result<Self, ObjectiveError> {
        let n = qxx.nrows();
        let p = quu.nrows();
        if !qxx.is_square() || !quu.is_square() {
            return Err(ObjectiveError::DimensionMismatch(
                "Qxx and Quu must be square".into(),
            ));
        }
        if qux.nrows() != p || qux.ncols() != n || lin_x.len() != n || lin_u.len() != p {
            return Err(ObjectiveError::DimensionMismatch(
                "cross/linear term dimensions must match Qxx and Quu".into(),
            ));
        }
        Ok(QuadraticObjective {
            qxx,
            quu,
            qux,
            lin_x,
            lin_u,
            convex,
        })
    }

    /// Diagonal convex quadratic with no cross terms.
    pub fn diagonal(qxx: &[f64], quu: &[f64]) -> Self {
        let n = qxx.len();
        let p = quu.len();
        QuadraticObjective {
            qxx: DMatrix::from_diagonal(&DVector::from_column_slice(qxx)),
            quu: DMatrix::from_diagonal(&DVector::from_column_slice(quu)),
            qux: DMatrix::zeros(p, n),
            lin_x: DVector::zeros(n),
            lin_u: DVector::zeros(p),
            convex: qxx.iter().chain(quu.iter()).all(|&v| v >= 0.0),
        }
    }

    /// Exact Lipschitz constant of `x -> H~^T grad Phi(x, u)`: the gradient is
    /// linear in `x` with Jacobian `[Qxx; Qux]`, so the constant is
    /// `|H^T Qxx + Qux|`.
    pub fn exact_x_lipschitz(&self, ssm: &SteadyStateMap) -> f64 {
        let jac = ssm.h().transpose() * &self.qxx + &self.qux;
        crate::numerics::spectral_norm(&jac).expect("finite quadratic coefficients")
    }
}

impl Objective for QuadraticObjective {
    fn state_dim(&self) -> usize {
        self.qxx.nrows()
    }

    fn input_dim(&self) -> usize {
        self.quu.nrows()
    }

    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.qxx * x)[(0, 0)]
            + 0.5 * (u.transpose() * &self.quu * u)[(0, 0)]
            + (u.transpose() * &self.qux * x)[(0, 0)]
            + self.lin_x.dot(x)
            + self.lin_u.dot(u)
    }

    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let p = u.len();
        let gx = &self.qxx * x + self.qux.transpose() * u + &self.lin_x;
        let gu = &self.qux * x + &self.quu * u + &self.lin_u;
        let mut g = DVector::zeros(n + p);
        g.rows_mut(0, n).copy_from(&gx);
        g.rows_mut(n, p).copy_from(&gu);
        g
    }

    fn is_convex(&self) -> bool {
        self.convex
    }
}

/// Analytic Lipschitz constant of the penalty objective.
///
/// Only `grad_x Phi = C^T Xi_y g(Cx)` varies with `x`, and the componentwise
/// penalty slope `g` is 1-Lipschitz, which gives `l = |H^T C^T Xi_y C|`. This
/// is far tighter than the generic product of a global gradient Lipschitz
/// constant with `|H~|`.
pub fn lipschitz_bound_analytic(
    obj: &PenaltyObjective,
    ssm: &SteadyStateMap,
) -> Result<f64, ObjectiveError> {
    if obj.d.iter().any(|&v| v != 0.0) {
        return Err(ObjectiveError::UnsupportedObjective(
            "analytic bound requires zero feedthrough; use lipschitz_bound_sampled",
        ));
    }
    let xi_c = DMatrix::from_fn(obj.c.nrows(), obj.c.ncols(), |i, j| obj.xi_y[i] * obj.c[(i, j)]);
    let m = ssm.h().transpose() * obj.c.transpose() * xi_c;
    Ok(crate::numerics::spectral_norm(&m).expect("finite objective data"))
}

/// Box over which the sampled Lipschitz estimator draws probes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
}

impl ProbeRegion {
    /// Symmetric box `[-x_scale, x_scale]^n x [-u_scale, u_scale]^p`.
    pub fn symmetric(n: usize, p: usize, x_scale: f64, u_scale: f64) -> Self {
        ProbeRegion {
            x_lo: DVector::from_element(n, -x_scale),
            x_hi: DVector::from_element(n, x_scale),
            u_lo: DVector::from_element(p, -u_scale),
            u_hi: DVector::from_element(p, u_scale),
        }
    }
}

/// Empirical lower estimate of the Lipschitz constant in the gain formula:
/// the largest sampled ratio `|H~^T (grad Phi(x,u) - grad Phi(x',u))| / |x - x'|`.
/// Deterministic for a fixed seed.
pub fn lipschitz_bound_sampled(
    obj: &dyn Objective,
    ssm: &SteadyStateMap,
    probes: usize,
    region: &ProbeRegion,
    seed: u64,
) -> f64 {
    assert!(probes >= 1, "at least one probe required");
    assert_eq!(region.x_lo.len(), obj.state_dim(), "probe region state size");
    assert_eq!(region.u_lo.len(), obj.input_dim(), "probe region input size");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng, lo: &DVector<f64>, hi: &DVector<f64>| {
        DVector::from_fn(lo.len(), |i, _| {
            if hi[i] > lo[i] {
                rng.random_range(lo[i]..hi[i])
            } else {
                lo[i]
            }
        })
    };
    let mut best = 0.0f64;
    for _ in 0..probes {
        let x = sample(&mut rng, &region.x_lo, &region.x_hi);
        let x_prime = sample(&mut rng, &region.x_lo, &region.x_hi);
        let u = sample(&mut rng, &region.u_lo, &region.u_hi);
        let dx = (&x - &x_prime).norm();
        if dx < 1e-12 {
            continue;
        }
        let g = obj.gradient(&x, &u);
        let g_prime = obj.gradient(&x_prime, &u);
        let diff = ssm.h_tilde_t() * (g - g_prime);
        best = best.max(diff.norm() / dx);
    }
    best
}
