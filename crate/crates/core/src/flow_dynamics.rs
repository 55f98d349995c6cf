//! Drift, gain, and diffusion of the stochastic flow.
//!
//! For the blended density with Hessian `S(λ)` the flow moving samples from
//! the prior to the posterior is
//!
//! ```text
//! dx = f(x,λ) dλ + q(λ) dw,      Q(λ) = q qᵀ positive semi-definite,
//! f  = S⁻¹ [ −∇x log h + K S⁻¹ ∇x log p ],
//! K  = ½ S Q S + ½ A_h.
//! ```
//!
//! `Q` is free: any positive semi-definite choice transports the same law.
//! With quadratic log-densities the drift is affine, `f = A(λ)x + b(λ)`,
//! which is what the integrator and the moment equations consume.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FlowError, Result};
use crate::linalg;
use crate::quadratic_model::Homotopy;

/// Diffusion matrix as a function of λ.
#[derive(Debug, Clone)]
pub enum DiffusionSchedule {
    /// `Q ≡ 0` (the deterministic flow).
    Zero { dim: usize },
    /// Constant `Q`.
    Constant { q: DMatrix<f64> },
    /// Piecewise-linear interpolation between `(λ, Q)` knots, held flat
    /// outside the knot range.
    PiecewiseLinear { knots: Vec<(f64, DMatrix<f64>)> },
}

/// Eigenvalues may dip this far below zero before a matrix stops counting as
/// positive semi-definite at schedule construction.
const PSD_CONSTRUCTION_TOL: f64 = 1e-12;

impl DiffusionSchedule {
    pub fn zero(dim: usize) -> Self {
        DiffusionSchedule::Zero { dim }
    }

    pub fn constant(q: DMatrix<f64>) -> Result<Self> {
        check_psd(&q, "diffusion Q", PSD_CONSTRUCTION_TOL)?;
        Ok(DiffusionSchedule::Constant {
            q: linalg::symmetrized(&q),
        })
    }

    /// Scalar multiple of the identity.
    pub fn scalar(value: f64, dim: usize) -> Result<Self> {
        Self::constant(value * DMatrix::identity(dim, dim))
    }

    pub fn piecewise_linear(mut knots: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(FlowError::InvalidConfig {
                reason: "diffusion knot table is empty".into(),
            });
        }
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        let dim = knots[0].1.nrows();
        for (lambda, q) in &knots {
            if q.nrows() != dim || q.ncols() != dim {
                return Err(FlowError::DimensionMismatch {
                    what: format!("diffusion knot at lambda={lambda}"),
                    expected: dim,
                    found: q.nrows(),
                });
            }
            check_psd(
                q,
                &format!("diffusion knot at lambda={lambda}"),
                PSD_CONSTRUCTION_TOL,
            )?;
        }
        let knots = knots
            .into_iter()
            .map(|(l, q)| (l, linalg::symmetrized(&q)))
            .collect();
        Ok(DiffusionSchedule::PiecewiseLinear { knots })
    }

    pub fn dim(&self) -> usize {
        match self {
            DiffusionSchedule::Zero { dim } => *dim,
            DiffusionSchedule::Constant { q } => q.nrows(),
            DiffusionSchedule::PiecewiseLinear { knots } => knots[0].1.nrows(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            DiffusionSchedule::Zero { .. } => true,
            DiffusionSchedule::Constant { q } => linalg::max_abs(q) == 0.0,
            DiffusionSchedule::PiecewiseLinear { knots } => {
                knots.iter().all(|(_, q)| linalg::max_abs(q) == 0.0)
            }
        }
    }

    /// `Q(λ)`. Linear interpolation of positive semi-definite knots stays
    /// positive semi-definite.
    pub fn q_at(&self, lambda: f64) -> DMatrix<f64> {
        match self {
            DiffusionSchedule::Zero { dim } => DMatrix::zeros(*dim, *dim),
            DiffusionSchedule::Constant { q } => q.clone(),
            DiffusionSchedule::PiecewiseLinear { knots } => {
                if lambda <= knots[0].0 {
                    return knots[0].1.clone();
                }
                if lambda >= knots[knots.len() - 1].0 {
                    return knots[knots.len() - 1].1.clone();
                }
                let idx = knots.partition_point(|(l, _)| *l <= lambda);
                let (l0, q0) = &knots[idx - 1];
                let (l1, q1) = &knots[idx];
                let t = (lambda - l0) / (l1 - l0);
                q0 * (1.0 - t) + q1 * t
            }
        }
    }
}

fn check_psd(q: &DMatrix<f64>, what: &str, tol: f64) -> Result<()> {
    if q.nrows() != q.ncols() {
        return Err(FlowError::DimensionMismatch {
            what: format!("{what} (must be square)"),
            expected: q.nrows(),
            found: q.ncols(),
        });
    }
    let min_eig = linalg::min_eigenvalue(q);
    if min_eig < -tol {
        return Err(FlowError::NotPositiveSemiDefinite {
            what: what.to_string(),
            min_eig,
            tol,
        });
    }
    Ok(())
}

/// Affine form of the drift at one λ, plus the diffusion factor.
///
/// `a` is the drift Jacobian `S⁻¹(−A_h + K)`, `b = f(0,λ)`, and
/// `q_factor · q_factorᵀ = Q(λ)` with one column per nonzero mode of `Q`.
#[derive(Debug, Clone)]
pub struct FlowCoefficients {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q_factor: DMatrix<f64>,
}

impl FlowCoefficients {
    /// `f(x) = A x + b`.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    /// Number of independent noise channels (numerical rank of `Q`).
    pub fn noise_dim(&self) -> usize {
        self.q_factor.ncols()
    }
}

/// Flow gain `K(λ) = ½ S Q S + ½ A_h`; symmetric by construction.
pub fn gain_k(hom: &Homotopy, lambda: f64, q: &DMatrix<f64>) -> DMatrix<f64> {
    let s = hom.hessian_log_p(lambda);
    linalg::symmetrized(&(0.5 * (&s * q * &s) + 0.5 * hom.likelihood().a()))
}

/// Drift `f(x,λ) = S⁻¹[−∇x log h + K S⁻¹ ∇x log p]`.
pub fn drift_f(
    hom: &Homotopy,
    x: &DVector<f64>,
    lambda: f64,
    q: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let factor = hom.neg_hessian_factor(lambda)?;
    let k = gain_k(hom, lambda, q);
    let grad_h = hom.likelihood().grad(x);
    let grad_p = hom.grad_log_p(x, lambda);
    // S⁻¹ v = −(−S)⁻¹ v
    let s_inv_grad_p = -factor.solve(&grad_p);
    Ok(-factor.solve(&(-grad_h + k * s_inv_grad_p)))
}

/// Affine drift coefficients and diffusion factor at one λ.
pub fn flow_coefficients(
    hom: &Homotopy,
    lambda: f64,
    schedule: &DiffusionSchedule,
) -> Result<FlowCoefficients> {
    let q = schedule.q_at(lambda);
    let factor = hom.neg_hessian_factor(lambda)?;
    let k = gain_k(hom, lambda, &q);
    // A = S⁻¹(−A_h + K) = −(−S)⁻¹(−A_h + K)
    let a = -factor.inverse() * (-hom.likelihood().a() + k);
    let b = drift_f(hom, &DVector::zeros(hom.dim()), lambda, &q)?;
    let q_factor = psd_factor(&q)?;
    Ok(FlowCoefficients { a, b, q_factor })
}

/// Factor a positive semi-definite `Q` as `q qᵀ` with `q ∈ ℝ^{n×m}`,
/// `m` the numerical rank. Eigenvalues in `[−1e−8·max|Q|, 0)` are clamped to
/// zero; anything lower is an error.
pub fn psd_factor(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    let scale = linalg::max_abs(q);
    if scale == 0.0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let eig = SymmetricEigen::new(linalg::symmetrized(q));
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let tol = 1e-8 * scale;
    if min_eig < -tol {
        return Err(FlowError::NotPositiveSemiDefinite {
            what: "diffusion Q".into(),
            min_eig,
            tol,
        });
    }
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let rank_tol = 1e-12 * max_eig;
    let kept: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > rank_tol).collect();
    let mut factor = DMatrix::zeros(n, kept.len());
    for (col, &i) in kept.iter().enumerate() {
        let scaled = eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt();
        factor.set_column(col, &scaled);
    }
    Ok(factor)
}
