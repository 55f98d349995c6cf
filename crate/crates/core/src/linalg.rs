//! Dense symmetric linear-algebra helpers.
//!
//! Everything here goes through symmetric eigendecomposition rather than LU or
//! Cholesky: the dimensions are small, and the eigenvalues are needed anyway
//! for the definiteness diagnostics that gate every inversion.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FlowError, Result};

/// Relative eigenvalue floor below which a nominally positive definite matrix
/// is refused.
pub const SPD_REL_TOL: f64 = 1e-10;

/// Returns `(A + Aᵀ)/2`.
pub fn symmetrized(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Largest absolute entry of a matrix (zero for empty matrices).
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
}

/// Maximum absolute asymmetry `max |A - Aᵀ|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrized(a))
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

/// Eigendecomposition of a symmetric positive definite matrix, with the
/// spectral quantities needed elsewhere (inverse, log-determinant, square
/// root) exposed directly.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl SpdFactor {
    /// Factor `a`, refusing if the smallest eigenvalue falls below
    /// `SPD_REL_TOL` times the largest. `what` names the matrix in errors.
    pub fn new(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        Self::with_tol(a, what, SPD_REL_TOL)
    }

    pub fn with_tol(a: &DMatrix<f64>, what: &str, rel_tol: f64) -> Result<Self> {
        let eig = SymmetricEigen::new(symmetrized(a));
        let max_eig = eig
            .eigenvalues
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let tol = rel_tol * max_eig.max(0.0);
        if min_eig.is_nan() || min_eig <= tol || max_eig <= 0.0 {
            return Err(FlowError::NotPositiveDefinite {
                what: what.to_string(),
                min_eig,
                max_eig,
                tol,
            });
        }
        Ok(Self {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// `A⁻¹`, symmetric by construction.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.scaled_form(|v| 1.0 / v)
    }

    /// `A⁻¹ x`.
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = self.vectors.transpose() * x;
        for (yi, &v) in y.iter_mut().zip(self.values.iter()) {
            *yi /= v;
        }
        &self.vectors * y
    }

    /// `ln det A`.
    pub fn ln_det(&self) -> f64 {
        self.values.iter().map(|v| v.ln()).sum()
    }

    /// A square root `L` with `L Lᵀ = A` (columns are eigenvectors scaled by
    /// the root eigenvalues; not the Cholesky factor).
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let mut l = self.vectors.clone();
        for (mut col, &v) in l.column_iter_mut().zip(self.values.iter()) {
            col *= v.sqrt();
        }
        l
    }

    /// Symmetric inverse square root `A^{-1/2}`.
    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        self.scaled_form(|v| 1.0 / v.sqrt())
    }

    fn scaled_form(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (mut col, &v) in scaled.column_iter_mut().zip(self.values.iter()) {
            col *= f(v);
        }
        symmetrized(&(scaled * self.vectors.transpose()))
    }
}

/// Pairwise (cascade) summation. Deterministic for a fixed input order and
/// more accurate than naive left-to-right accumulation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
