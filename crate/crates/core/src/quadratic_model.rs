//! Exponential-quadratic log-densities and the prior-to-posterior homotopy.
//!
//! A log-density of the form `½ xᵀA x + bᵀx + c` covers both the Gaussian
//! prior (A negative definite) and a broad class of measurement likelihoods
//! (A negative semi-definite, possibly singular or zero). Blending them as
//! `log g + λ·log h − log Γ(λ)` produces a Gaussian at every λ whose mean and
//! covariance are available in closed form; those closed forms are what the
//! flow and the diagnostics are verified against.

use nalgebra::{DMatrix, DVector};

use crate::error::{FlowError, Result};
use crate::linalg::{self, SpdFactor};

/// A log-density `½ xᵀA x + bᵀx + c` with symmetric `A`.
#[derive(Debug, Clone)]
pub struct QuadraticLogDensity {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl QuadraticLogDensity {
    /// Build from raw coefficients. `a` is symmetrized as `(A + Aᵀ)/2`.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(FlowError::DimensionMismatch {
                what: "quadratic coefficient A (must be square)".into(),
                expected: a.nrows(),
                found: a.ncols(),
            });
        }
        if a.nrows() == 0 {
            return Err(FlowError::InvalidConfig {
                reason: "dimension must be at least 1".into(),
            });
        }
        if b.len() != a.nrows() {
            return Err(FlowError::DimensionMismatch {
                what: "linear coefficient b".into(),
                expected: a.nrows(),
                found: b.len(),
            });
        }
        Ok(Self {
            a: linalg::symmetrized(&a),
            b,
            c,
        })
    }

    /// Natural parameters of a Gaussian `N(mean, covariance)`:
    /// `A = −Σ⁻¹`, `b = Σ⁻¹μ`, `c = −½ μᵀΣ⁻¹μ − ½ ln det(2πΣ)`.
    /// The resulting density integrates to one.
    pub fn gaussian_prior(mean: &DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() {
            return Err(FlowError::DimensionMismatch {
                what: "prior covariance".into(),
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        let factor = SpdFactor::new(covariance, "prior covariance")?;
        let precision = factor.inverse();
        let n = mean.len() as f64;
        let b = &precision * mean;
        let c =
            -0.5 * mean.dot(&b) - 0.5 * (n * (2.0 * std::f64::consts::PI).ln() + factor.ln_det());
        Self::new(-precision, b, c)
    }

    /// Log-likelihood of `z = Hx + v`, `v ~ N(0, R)`, as a quadratic in `x`:
    /// `A = −HᵀR⁻¹H`, `b = HᵀR⁻¹z`, `c = −½ zᵀR⁻¹z − ½ ln det(2πR)`.
    /// `A` is singular whenever the measurement dimension is below the state
    /// dimension, and zero when `H = 0`.
    pub fn linear_gaussian_measurement(
        h: &DMatrix<f64>,
        r: &DMatrix<f64>,
        z: &DVector<f64>,
    ) -> Result<Self> {
        let (d, n) = (h.nrows(), h.ncols());
        if r.nrows() != d || r.ncols() != d {
            return Err(FlowError::DimensionMismatch {
                what: "measurement noise R".into(),
                expected: d,
                found: r.nrows(),
            });
        }
        if z.len() != d {
            return Err(FlowError::DimensionMismatch {
                what: "measurement z".into(),
                expected: d,
                found: z.len(),
            });
        }
        let factor = SpdFactor::new(r, "measurement noise R")?;
        let r_inv = factor.inverse();
        let a = -(h.transpose() * &r_inv * h);
        let b = h.transpose() * (&r_inv * z);
        let c = -0.5 * z.dot(&(&r_inv * z))
            - 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + factor.ln_det());
        let _ = n;
        Self::new(a, b, c)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// `½ xᵀA x + bᵀx + c`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.a * x)) + self.b.dot(x) + self.c
    }

    /// `A x + b`.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }
}

/// Gaussian moments `(mean, covariance)`.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// The pair (prior `g`, likelihood `h`) with the blended density
/// `p(x,λ) ∝ g(x) h(x)^λ` and everything derived from it.
///
/// Construction checks the curvature conditions that make the blend
/// well-posed on all of `[0, 1]`: `−A_g` positive definite and `−A_h`
/// positive semi-definite, which together keep the Hessian
/// `S(λ) = A_g + λA_h` negative definite for every λ.
#[derive(Debug, Clone)]
pub struct Homotopy {
    prior: QuadraticLogDensity,
    likelihood: QuadraticLogDensity,
}

impl Homotopy {
    pub fn new(prior: QuadraticLogDensity, likelihood: QuadraticLogDensity) -> Result<Self> {
        if prior.dim() != likelihood.dim() {
            return Err(FlowError::DimensionMismatch {
                what: "likelihood dimension".into(),
                expected: prior.dim(),
                found: likelihood.dim(),
            });
        }
        // −A_g must be positive definite.
        SpdFactor::new(&(-prior.a()), "prior curvature -A_g")?;
        // −A_h must be positive semi-definite.
        let min_eig = linalg::min_eigenvalue(&(-likelihood.a()));
        let tol = -1e-10 * linalg::max_abs(likelihood.a()).max(1.0);
        if min_eig < tol {
            return Err(FlowError::NotPositiveSemiDefinite {
                what: "likelihood curvature -A_h".into(),
                min_eig,
                tol,
            });
        }
        Ok(Self { prior, likelihood })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &QuadraticLogDensity {
        &self.prior
    }

    pub fn likelihood(&self) -> &QuadraticLogDensity {
        &self.likelihood
    }

    /// Hessian of the blended log-density, `S(λ) = A_g + λ A_h`.
    pub fn hessian_log_p(&self, lambda: f64) -> DMatrix<f64> {
        self.prior.a() + lambda * self.likelihood.a()
    }

    /// Linear coefficient of the blended gradient, `b_g + λ b_h`.
    pub fn blended_b(&self, lambda: f64) -> DVector<f64> {
        self.prior.b() + lambda * self.likelihood.b()
    }

    /// Factorization of `−S(λ)`, positive definite under the construction
    /// checks; fails with a singular-homotopy diagnostic otherwise.
    pub fn neg_hessian_factor(&self, lambda: f64) -> Result<SpdFactor> {
        SpdFactor::new(&(-self.hessian_log_p(lambda)), "-S(lambda)").map_err(|e| match e {
            FlowError::NotPositiveDefinite {
                min_eig,
                max_eig,
                tol,
                ..
            } => FlowError::SingularHomotopy {
                lambda,
                min_eig,
                max_eig,
                tol,
            },
            other => other,
        })
    }

    /// `∇x log p = S(λ) x + b_g + λ b_h`.
    pub fn grad_log_p(&self, x: &DVector<f64>, lambda: f64) -> DVector<f64> {
        self.hessian_log_p(lambda) * x + self.blended_b(lambda)
    }

    /// Mean `x_μ(λ) = −S(λ)⁻¹ (b_g + λ b_h)` and covariance
    /// `P_μ(λ) = −S(λ)⁻¹` of the blended density.
    pub fn posterior_moments(&self, lambda: f64) -> Result<PosteriorMoments> {
        let factor = self.neg_hessian_factor(lambda)?;
        let mean = factor.solve(&self.blended_b(lambda));
        Ok(PosteriorMoments {
            mean,
            covariance: factor.inverse(),
        })
    }

    /// Prior moments, i.e. the λ = 0 endpoint.
    pub fn prior_moments(&self) -> Result<PosteriorMoments> {
        self.posterior_moments(0.0)
    }

    /// Log normalization `log Γ(λ)` of `g h^λ`:
    /// `c_g + λc_h − ½ βᵀS⁻¹β + (n/2) ln 2π − ½ ln det(−S)` with
    /// `β = b_g + λ b_h`. `Γ(0) = 1` for a normalized prior. The flow itself
    /// never needs this; it is exposed for diagnostics.
    pub fn log_gamma(&self, lambda: f64) -> Result<f64> {
        let factor = self.neg_hessian_factor(lambda)?;
        let beta = self.blended_b(lambda);
        // βᵀS⁻¹β = −βᵀ(−S)⁻¹β
        let quad = -beta.dot(&factor.solve(&beta));
        let n = self.dim() as f64;
        Ok(self.prior.c() + lambda * self.likelihood.c() - 0.5 * quad
            + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * factor.ln_det())
    }

    /// `log p(x, λ) = log g(x) + λ log h(x) − log Γ(λ)`.
    pub fn log_p(&self, x: &DVector<f64>, lambda: f64) -> Result<f64> {
        Ok(self.prior.eval(x) + lambda * self.likelihood.eval(x) - self.log_gamma(lambda)?)
    }

    /// The unnormalized potential `log g(x) + λ log h(x)`; this is the
    /// quantity whose ensemble mean the diffusion-operator identity governs.
    pub fn log_potential(&self, x: &DVector<f64>, lambda: f64) -> f64 {
        self.prior.eval(x) + lambda * self.likelihood.eval(x)
    }
}
