//! Exact mean and covariance dynamics of the induced linear SDE.
//!
//! With affine drift `f = A(λ)x + b(λ)` and diffusion `Q(λ)`, the ensemble
//! mean and covariance obey
//!
//! ```text
//! dm/dλ = A m + b,        dP/dλ = A P + P Aᵀ + Q,
//! ```
//!
//! and, started from the prior moments, their solution coincides with the
//! blended density's analytic moments `x_μ(λ)`, `P_μ(λ)` for every positive
//! semi-definite `Q`. Propagating these ODEs and comparing against the
//! closed forms is the executable version of that identity.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::flow_dynamics::{self, DiffusionSchedule};
use crate::linalg;
use crate::quadratic_model::Homotopy;

/// Mean and covariance at one λ.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub lambda: f64,
}

/// Right-hand side of the moment ODEs at the state's λ.
pub fn moment_rhs(
    state: &MomentState,
    hom: &Homotopy,
    schedule: &DiffusionSchedule,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let coeffs = flow_dynamics::flow_coefficients(hom, state.lambda, schedule)?;
    let dmean = &coeffs.a * &state.mean + &coeffs.b;
    let ap = &coeffs.a * &state.covariance;
    let dcov = &ap + ap.transpose() + schedule.q_at(state.lambda);
    Ok((dmean, dcov))
}

/// RK4 trajectory of the moment ODEs over a uniform λ-grid, starting from
/// the prior moments. Returns `steps + 1` states; the covariance is
/// symmetrized after every step.
pub fn propagate_moments(
    hom: &Homotopy,
    schedule: &DiffusionSchedule,
    steps: usize,
) -> Result<Vec<MomentState>> {
    let prior = hom.prior_moments()?;
    let mut state = MomentState {
        mean: prior.mean,
        covariance: prior.covariance,
        lambda: 0.0,
    };
    let h = 1.0 / steps as f64;
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(state.clone());
    for s in 0..steps {
        let lambda = s as f64 / steps as f64;
        let next_lambda = ((s + 1) as f64 / steps as f64).min(1.0);
        state.lambda = lambda;

        let eval = |lam: f64, m: &DVector<f64>, p: &DMatrix<f64>| -> Result<_> {
            let probe = MomentState {
                mean: m.clone(),
                covariance: p.clone(),
                lambda: lam,
            };
            moment_rhs(&probe, hom, schedule)
        };

        let (k1m, k1p) = eval(lambda, &state.mean, &state.covariance)?;
        let (k2m, k2p) = eval(
            lambda + 0.5 * h,
            &(&state.mean + 0.5 * h * &k1m),
            &(&state.covariance + 0.5 * h * &k1p),
        )?;
        let (k3m, k3p) = eval(
            lambda + 0.5 * h,
            &(&state.mean + 0.5 * h * &k2m),
            &(&state.covariance + 0.5 * h * &k2p),
        )?;
        let (k4m, k4p) = eval(
            next_lambda,
            &(&state.mean + h * &k3m),
            &(&state.covariance + h * &k3p),
        )?;
        state.mean += h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        state.covariance = linalg::symmetrized(
            &(&state.covariance + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)),
        );
        state.lambda = next_lambda;
        trajectory.push(state.clone());
    }
    Ok(trajectory)
}

/// Closed-form derivative of the blended mean,
/// `dx_μ/dλ = S⁻¹ A_h S⁻¹ β − S⁻¹ b_h`.
pub fn analytic_mean_derivative(hom: &Homotopy, lambda: f64) -> Result<DVector<f64>> {
    let factor = hom.neg_hessian_factor(lambda)?;
    let beta = hom.blended_b(lambda);
    let s_inv_beta = -factor.solve(&beta);
    let a_h_s_inv_beta = hom.likelihood().a() * s_inv_beta;
    Ok(-factor.solve(&a_h_s_inv_beta) + factor.solve(hom.likelihood().b()))
}

/// Closed-form derivative of the blended covariance, `dP_μ/dλ = S⁻¹ A_h S⁻¹`.
pub fn analytic_cov_derivative(hom: &Homotopy, lambda: f64) -> Result<DMatrix<f64>> {
    let factor = hom.neg_hessian_factor(lambda)?;
    let s_inv = -factor.inverse();
    Ok(&s_inv * hom.likelihood().a() * &s_inv)
}
