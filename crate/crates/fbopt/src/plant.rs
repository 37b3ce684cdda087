//! LTI plant representation, exponential-stability certification, steady-state
//! maps, and exact zero-order-hold discretization.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::numerics::{self, NumericsError};

#[derive(Debug, Clone, PartialEq)]
pub enum PlantError {
    /// The Lyapunov certificate does not exist or is not positive definite:
    /// the plant is not exponentially asymptotically stable.
    NotHurwitz { min_eigenvalue: Option<f64> },
    Numerics(NumericsError),
    Dimension(String),
}

impl fmt::Display for PlantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlantError::NotHurwitz { min_eigenvalue } => match min_eigenvalue {
                Some(e) => write!(f, "plant is not Hurwitz (min Lyapunov eigenvalue {e})"),
                None => write!(f, "plant is not Hurwitz (Lyapunov solve failed)"),
            },
            PlantError::Numerics(e) => write!(f, "{e}"),
            PlantError::Dimension(msg) => write!(f, "dimension error: {msg}"),
        }
    }
}

impl std::error::Error for PlantError {}

impl From<NumericsError> for PlantError {
    fn from(e: NumericsError) -> Self {
        PlantError::Numerics(e)
    }
}

/// The physical system `x' = Ax + Bu + Qw`, `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl LtiPlant {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(PlantError::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(PlantError::Dimension(format!(
                "B must have {} rows, got {}",
                n,
                b.nrows()
            )));
        }
        if q.nrows() != n {
            return Err(PlantError::Dimension(format!(
                "Q must have {} rows, got {}",
                n,
                q.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(PlantError::Dimension(format!(
                "C must have {} columns, got {}",
                n,
                c.ncols()
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(PlantError::Dimension(format!(
                "D must be {}x{}, got {}x{}",
                c.nrows(),
                b.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        for (m, context) in [
            (&a, "plant matrix A"),
            (&b, "plant matrix B"),
            (&q, "plant matrix Q"),
            (&c, "plant matrix C"),
            (&d, "plant matrix D"),
        ] {
            numerics::ensure_finite(m, context)?;
        }
        Ok(LtiPlant { a, b, q, c, d })
    }

    /// State dimension n.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension p.
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Disturbance dimension q.
    pub fn disturbance_dim(&self) -> usize {
        self.q.ncols()
    }

    /// Output dimension m.
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }

    /// State derivative `Ax + Bu + Qw`.
    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.q * w
    }
}

/// Certify exponential stability by solving `A^T P + P A = -I` and checking
/// `P > 0`. Returns the Lyapunov matrix `P` together with its smallest
/// eigenvalue.
pub fn certify_stability(plant: &LtiPlant) -> Result<(DMatrix<f64>, f64), PlantError> {
    let p = match numerics::solve_lyapunov(plant.a()) {
        Ok(p) => p,
        Err(NumericsError::SingularLyapunov) => {
            return Err(PlantError::NotHurwitz {
                min_eigenvalue: None,
            })
        }
        Err(e) => return Err(PlantError::Numerics(e)),
    };
    let min_eig = p.clone().symmetric_eigen().eigenvalues.min();
    if min_eig <= 0.0 {
        return Err(PlantError::NotHurwitz {
            min_eigenvalue: Some(min_eig),
        });
    }
    Ok((p, min_eig))
}

/// The affine steady-state map `x = Hu + Rw` of a Hurwitz plant, plus the
/// stacked sensitivity `H~^T = [H^T  I_p]` used by the gradient feedback law.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateMap {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    h_tilde_t: DMatrix<f64>,
}

impl SteadyStateMap {
    /// `H = -A^{-1} B`, `R = -A^{-1} Q`.
    pub fn new(plant: &LtiPlant) -> Result<Self, PlantError> {
        let h = -numerics::solve_linear(plant.a(), plant.b())?;
        let r = -numerics::solve_linear(plant.a(), plant.q())?;
        Ok(Self::from_h_r(h, r))
    }

    /// Build directly from `H` and `R` (used to keep a stale model after
    /// plant-changing events).
    pub fn from_h_r(h: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let n = h.nrows();
        let p = h.ncols();
        let mut h_tilde_t = DMatrix::zeros(p, n + p);
        h_tilde_t.view_mut((0, 0), (p, n)).copy_from(&h.transpose());
        h_tilde_t
            .view_mut((0, n), (p, p))
            .copy_from(&DMatrix::identity(p, p));
        SteadyStateMap { h, r, h_tilde_t }
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn h_tilde_t(&self) -> &DMatrix<f64> {
        &self.h_tilde_t
    }

    pub fn state_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.h.ncols()
    }

    /// Equilibrium state for constant `u` and `w`.
    pub fn steady_state(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.h * u + &self.r * w
    }
}

/// Exact zero-order-hold discretization of a plant at a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedPlant {
    step: f64,
    a_d: DMatrix<f64>,
    b_d: DMatrix<f64>,
    q_d: DMatrix<f64>,
}

impl DiscretizedPlant {
    /// Computes `a_d = e^{A h}` and `[b_d q_d] = (int_0^h e^{A s} ds) [B Q]`
    /// via the exponential of the block matrix `[[A, [B Q]], [0, 0]] h`.
    pub fn new(plant: &LtiPlant, step: f64) -> Result<Self, PlantError> {
        assert!(step > 0.0, "discretization step must be positive");
        let n = plant.state_dim();
        let p = plant.input_dim();
        let q = plant.disturbance_dim();
        let aug_dim = n + p + q;
        let mut block = DMatrix::<f64>::zeros(aug_dim, aug_dim);
        block.view_mut((0, 0), (n, n)).copy_from(plant.a());
        block.view_mut((0, n), (n, p)).copy_from(plant.b());
        block.view_mut((0, n + p), (n, q)).copy_from(plant.q());
        block *= step;
        let exp = numerics::matrix_exponential(&block)?;
        Ok(DiscretizedPlant {
            step,
            a_d: exp.view((0, 0), (n, n)).into(),
            b_d: exp.view((0, n), (n, p)).into(),
            q_d: exp.view((0, n + p), (n, q)).into(),
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn a_d(&self) -> &DMatrix<f64> {
        &self.a_d
    }

    pub fn b_d(&self) -> &DMatrix<f64> {
        &self.b_d
    }

    pub fn q_d(&self) -> &DMatrix<f64> {
        &self.q_d
    }

    /// One exact step with `u`, `w` held constant.
    pub fn advance(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a_d * x + &self.b_d * u + &self.q_d * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn scalar_plant(a: f64, b: f64, q: f64) -> LtiPlant {
        LtiPlant::new(
            DMatrix::from_row_slice(1, 1, &[a]),
            DMatrix::from_row_slice(1, 1, &[b]),
            DMatrix::from_row_slice(1, 1, &[q]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[0.0]),
        )
        .unwrap()
    }

    #[test]
    fn certify_scalar() {
        let plant = scalar_plant(-1.0, 1.0, 1.0);
        let (p, min_eig) = certify_stability(&plant).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(min_eig, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn certify_damped_oscillator() {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let (p, min_eig) = certify_stability(&plant).unwrap();
        assert!(min_eig > 0.0);
        let residual =
            (plant.a().transpose() * &p + &p * plant.a() + DMatrix::<f64>::identity(2, 2)).norm();
        assert!(residual < 1e-10);
    }

    #[test]
    fn certify_rejects_double_integrator() {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        assert!(matches!(
            certify_stability(&plant),
            Err(PlantError::NotHurwitz { .. })
        ));
    }

    #[test]
    fn steady_state_map_identity_case() {
        let n = 3;
        let plant = LtiPlant::new(
            -DMatrix::<f64>::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
        )
        .unwrap();
        let ssm = SteadyStateMap::new(&plant).unwrap();
        assert!((ssm.h() - DMatrix::<f64>::identity(n, n)).norm() < 1e-12);
        assert!((ssm.r() - DMatrix::<f64>::identity(n, n)).norm() < 1e-12);
    }

    #[test]
    fn steady_state_map_scalar() {
        let plant = scalar_plant(-2.0, 4.0, 1.0);
        let ssm = SteadyStateMap::new(&plant).unwrap();
        assert_abs_diff_eq!(ssm.h()[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ssm.r()[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn steady_state_map_by_substitution() {
        // -A H = B solved by hand gives H = (1, 1)^T.
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let ssm = SteadyStateMap::new(&plant).unwrap();
        let expected = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!((ssm.h() - &expected).norm() < 1e-10);
        assert!((plant.a() * ssm.h() + plant.b()).norm() < 1e-9);
    }

    #[test]
    fn h_tilde_layout() {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let ssm = SteadyStateMap::new(&plant).unwrap();
        let ht = ssm.h_tilde_t();
        assert_eq!((ht.nrows(), ht.ncols()), (1, 3));
        assert_abs_diff_eq!(ht[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(ht[(0, 1)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(ht[(0, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn discretize_scalar_closed_form() {
        let plant = scalar_plant(-1.0, 1.0, 0.0);
        let h = 0.25;
        let disc = DiscretizedPlant::new(&plant, h).unwrap();
        assert_abs_diff_eq!(disc.a_d()[(0, 0)], (-h).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(disc.b_d()[(0, 0)], 1.0 - (-h).exp(), epsilon = 1e-12);
    }

    #[test]
    fn discretize_pure_integrator() {
        let plant = scalar_plant(0.0, 1.0, 0.0);
        let disc = DiscretizedPlant::new(&plant, 0.1).unwrap();
        assert_abs_diff_eq!(disc.a_d()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(disc.b_d()[(0, 0)], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn discretize_semigroup_property() {
        let plant = LtiPlant::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let (h1, h2) = (0.07, 0.13);
        let d1 = DiscretizedPlant::new(&plant, h1).unwrap();
        let d2 = DiscretizedPlant::new(&plant, h2).unwrap();
        let d12 = DiscretizedPlant::new(&plant, h1 + h2).unwrap();
        assert!((d12.a_d() - d1.a_d() * d2.a_d()).norm() < 1e-12);
    }

    #[test]
    fn steady_state_is_discretization_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = crate::numerics::test_support::random_hurwitz(&mut rng, 4, 0.3);
        let plant = LtiPlant::new(
            a,
            DMatrix::from_fn(4, 2, |i, j| ((i + 2 * j) as f64).sin()),
            DMatrix::from_fn(4, 1, |i, _| 0.3 * (i as f64 + 1.0)),
            DMatrix::identity(4, 4),
            DMatrix::zeros(4, 2),
        )
        .unwrap();
        let ssm = SteadyStateMap::new(&plant).unwrap();
        let disc = DiscretizedPlant::new(&plant, 0.4).unwrap();
        let u = DVector::from_column_slice(&[0.7, -0.2]);
        let w = DVector::from_column_slice(&[1.3]);
        let x_ss = ssm.steady_state(&u, &w);
        assert!((disc.advance(&x_ss, &u, &w) - &x_ss).norm() < 1e-8);
        // The steady-state residuals A H + B and A R + Q should vanish.
        assert!((plant.a() * ssm.h() + plant.b()).norm() < 1e-9);
        assert!((plant.a() * ssm.r() + plant.q()).norm() < 1e-9);
    }

    /// Classical fixed-step RK4, used only as an independent reference here.
    fn rk4_step(plant: &LtiPlant, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>, h: f64) -> DVector<f64> {
        let f = |x: &DVector<f64>| plant.derivative(x, u, w);
        let k1 = f(x);
        let k2 = f(&(x + &k1 * (h / 2.0)));
        let k3 = f(&(x + &k2 * (h / 2.0)));
        let k4 = f(&(x + &k3 * h));
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    #[test]
    fn exact_step_matches_fine_rk4() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in [2usize, 4] {
            let a = crate::numerics::test_support::random_hurwitz(&mut rng, n, 0.4);
            let plant = LtiPlant::new(
                a,
                DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.7).cos()),
                DMatrix::from_fn(n, 1, |i, _| 0.1 * i as f64),
                DMatrix::identity(n, n),
                DMatrix::zeros(n, 1),
            )
            .unwrap();
            let step = 0.5;
            let disc = DiscretizedPlant::new(&plant, step).unwrap();
            let x0 = DVector::from_fn(n, |i, _| 1.0 / (i as f64 + 1.0));
            let u = DVector::from_column_slice(&[0.4]);
            let w = DVector::from_column_slice(&[-0.8]);

            let exact = disc.advance(&x0, &u, &w);
            let substeps = 1000;
            let mut x_ref = x0.clone();
            for _ in 0..substeps {
                x_ref = rk4_step(&plant, &x_ref, &u, &w, step / substeps as f64);
            }
            let rel = (&exact - &x_ref).norm() / x_ref.norm();
            assert!(rel <= 1e-6, "relative mismatch {rel} at n={n}");
        }
    }
}
