//! Dense linear-algebra primitives shared by every other module: Lyapunov
//! solve, matrix exponential, spectral norm, and linear solves.
//!
//! Everything operates on `nalgebra` dynamic matrices of `f64`. Inputs are
//! required to be finite; the entry points check and report [`NumericsError::NonFinite`]
//! instead of propagating NaNs.

use std::fmt;

use nalgebra::{DMatrix, DVector};

/// Central record of the numeric tolerances used for residual checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Acceptable Frobenius residual of `A^T P + P A + I` relative to `1 + |P|`.
    pub lyapunov_residual: f64,
    /// Acceptable asymmetry `|P - P^T|` of a Lyapunov solution.
    pub symmetry: f64,
    /// Relative accuracy of the largest singular value.
    pub spectral_norm_rel: f64,
    /// Acceptable relative residual `|AX - B| / |B|` of a linear solve.
    pub linear_solve_rel: f64,
    /// Relative accuracy of the matrix exponential on well-conditioned inputs.
    pub expm_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            lyapunov_residual: 1e-8,
            symmetry: 1e-10,
            spectral_norm_rel: 1e-9,
            linear_solve_rel: 1e-9,
            expm_rel: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NumericsError {
    /// An input or result contains NaN or infinite entries.
    NonFinite { context: &'static str },
    /// The vectorized Lyapunov system is numerically singular, which signals
    /// an `A` that is not Hurwitz or only marginally stable.
    SingularLyapunov,
    /// Coefficient matrix singular to working precision.
    SingularMatrix,
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::NonFinite { context } => {
                write!(f, "non-finite entries in {context}")
            }
            NumericsError::SingularLyapunov => write!(
                f,
                "Lyapunov system is singular (A has eigenvalue pairs summing to zero)"
            ),
            NumericsError::SingularMatrix => {
                write!(f, "matrix is singular to working precision")
            }
        }
    }
}

impl std::error::Error for NumericsError {}

pub fn ensure_finite(m: &DMatrix<f64>, context: &'static str) -> Result<(), NumericsError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { context })
    }
}

pub fn ensure_finite_vec(v: &DVector<f64>, context: &'static str) -> Result<(), NumericsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { context })
    }
}

/// Solve the continuous-time Lyapunov equation `A^T P + P A = -I` for `P`.
///
/// Small systems go through dense Kronecker vectorization; larger ones
/// through a Schur-based Bartels-Stewart substitution, since the n^2-by-n^2
/// Kronecker matrix stops fitting in memory around a few hundred states.
/// Both paths solve the same equation and are cross-checked in the tests.
/// The unique solution is symmetric, so the result is symmetrized to scrub
/// roundoff. If `A` is Hurwitz the result is positive definite.
pub fn solve_lyapunov(a: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    assert!(a.is_square(), "solve_lyapunov requires a square matrix");
    ensure_finite(a, "solve_lyapunov input")?;
    let n = a.nrows();
    let mut p = if n <= 64 {
        lyapunov_kronecker(a)?
    } else {
        lyapunov_bartels_stewart(a)?
    };
    // Discard roundoff asymmetry; the exact solution is symmetric.
    p = (&p + p.transpose()) * 0.5;

    let residual = (a.transpose() * &p + &p * a + DMatrix::<f64>::identity(n, n)).norm();
    if !residual.is_finite() || residual > 1e-6 * (1.0 + p.norm()) {
        return Err(NumericsError::SingularLyapunov);
    }
    Ok(p)
}

/// Dense solve of `(I (x) A^T + A^T (x) I) vec(P) = vec(-I)`.
fn lyapunov_kronecker(a: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    let n = a.nrows();
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let system = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_fn(n * n, |k, _| {
        // vec(-I) in column-major order
        if k % n == k / n {
            -1.0
        } else {
            0.0
        }
    });
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or(NumericsError::SingularLyapunov)?;
    Ok(DMatrix::from_column_slice(n, n, solution.as_slice()))
}

/// Bartels-Stewart: reduce `A = U T U^T` to real Schur form, solve the
/// quasi-triangular equation `T^T X + X T = -I` block column by block
/// column, and transform back with `P = U X U^T`.
fn lyapunov_bartels_stewart(a: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    let n = a.nrows();
    let schur = a
        .clone()
        .try_schur(1e-13, 0)
        .ok_or(NumericsError::SingularLyapunov)?;
    let (u, t) = schur.unpack();

    // Diagonal block structure of the real Schur form: a block is 2x2 iff the
    // subdiagonal entry is nonzero.
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let size = if i + 1 < n && t[(i + 1, i)].abs() > 1e-13 * (1.0 + t[(i, i)].abs()) {
            2
        } else {
            1
        };
        blocks.push((i, size));
        i += size;
    }

    let tt = t.transpose();
    let mut x = DMatrix::<f64>::zeros(n, n);
    let c = -DMatrix::<f64>::identity(n, n);

    for &(j0, jw) in &blocks {
        for &(i0, iw) in &blocks {
            // rhs = C_IJ - sum_{K<I} (T^T)_IK X_KJ - sum_{L<J} X_IL T_LJ
            let mut rhs = c.view((i0, j0), (iw, jw)).clone_owned();
            if i0 > 0 {
                rhs -= tt.view((i0, 0), (iw, i0)) * x.view((0, j0), (i0, jw));
            }
            if j0 > 0 {
                rhs -= x.view((i0, 0), (iw, j0)) * t.view((0, j0), (j0, jw));
            }
            // Solve T_II^T X_IJ + X_IJ T_JJ = rhs as a small Kronecker system.
            let tii_t = tt.view((i0, i0), (iw, iw)).clone_owned();
            let tjj = t.view((j0, j0), (jw, jw)).clone_owned();
            let small = DMatrix::<f64>::identity(jw, jw).kronecker(&tii_t)
                + tjj.transpose().kronecker(&DMatrix::<f64>::identity(iw, iw));
            let rhs_vec = DVector::from_column_slice(rhs.as_slice());
            let sol = small
                .lu()
                .solve(&rhs_vec)
                .ok_or(NumericsError::SingularLyapunov)?;
            x.view_mut((i0, j0), (iw, jw))
                .copy_from(&DMatrix::from_column_slice(iw, jw, sol.as_slice()));
        }
    }

    Ok(&u * x * u.transpose())
}

/// Largest singular value of `a`.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64, NumericsError> {
    assert!(!a.is_empty(), "spectral_norm requires a nonempty matrix");
    ensure_finite(a, "spectral_norm input")?;
    let svd = a.clone().svd(false, false);
    Ok(svd.singular_values.max())
}

// Degree-13 Pade numerator coefficients for the matrix exponential
// (Higham's scaling-and-squaring method).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

const PADE13_THETA: f64 = 5.371920351148152;

/// Matrix exponential `e^A` via scaling-and-squaring with a Pade(13,13) core.
pub fn matrix_exponential(a: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    assert!(a.is_square(), "matrix_exponential requires a square matrix");
    ensure_finite(a, "matrix_exponential input")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let norm = one_norm(a);
    let squarings = if norm > PADE13_THETA {
        (norm / PADE13_THETA).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);

    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let w1 = &a6 * PADE13[13] + &a4 * PADE13[11] + &a2 * PADE13[9];
    let w2 = &a6 * &w1 + &a6 * PADE13[7] + &a4 * PADE13[5] + &a2 * PADE13[3] + &eye * PADE13[1];
    let u = &scaled * w2;
    let v1 = &a6 * PADE13[12] + &a4 * PADE13[10] + &a2 * PADE13[8];
    let v = &a6 * &v1 + &a6 * PADE13[6] + &a4 * PADE13[4] + &a2 * PADE13[2] + &eye * PADE13[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .ok_or(NumericsError::SingularMatrix)?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    ensure_finite(&result, "matrix_exponential result")?;
    Ok(result)
}

/// Solve `A X = B` by LU with partial pivoting plus one step of iterative
/// refinement. Reports [`NumericsError::SingularMatrix`] when the residual
/// cannot be brought below the working-precision contract.
pub fn solve_linear(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    assert!(a.is_square(), "solve_linear requires a square coefficient matrix");
    assert_eq!(
        a.nrows(),
        b.nrows(),
        "solve_linear dimension mismatch: {}x{} vs {}x{}",
        a.nrows(),
        a.ncols(),
        b.nrows(),
        b.ncols()
    );
    ensure_finite(a, "solve_linear coefficients")?;
    ensure_finite(b, "solve_linear right-hand side")?;

    let lu = a.clone().lu();
    let mut x = lu.solve(b).ok_or(NumericsError::SingularMatrix)?;
    let correction = lu.solve(&(b - a * &x));
    if let Some(dx) = correction {
        x += dx;
    }
    let residual = (a * &x - b).norm();
    let tol = Tolerances::default().linear_solve_rel;
    if !residual.is_finite() || residual > tol * (1.0 + b.norm()) {
        return Err(NumericsError::SingularMatrix);
    }
    Ok(x)
}

/// Convenience wrapper for vector right-hand sides.
pub fn solve_linear_vec(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>, NumericsError> {
    let b_mat = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_linear(a, &b_mat)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    let mut max = 0.0f64;
    for j in 0..a.ncols() {
        let sum: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        max = max.max(sum);
    }
    max
}
