//! Stochastic particle flow for Bayesian measurement updates.
//!
//! The flow deforms samples of a Gaussian prior into samples of the posterior
//! by integrating a stochastic differential equation over a pseudo-time
//! λ ∈ [0, 1], under which the sample law matches the blended density
//! `p(x,λ) ∝ g(x)·h(x)^λ` at every λ. The diffusion matrix of the SDE is a
//! free positive semi-definite parameter: every choice transports the same
//! law.
//!
//! The crate provides:
//!
//! - [`quadratic_model`]: exponential-quadratic log-densities, the blended
//!   density, and its closed-form Gaussian moments;
//! - [`flow_dynamics`]: the flow drift, gain, and diffusion schedules;
//! - [`sde_integrator`]: Euler–Maruyama / RK4 ensemble propagation with
//!   counter-based reproducible noise streams;
//! - [`moment_odes`]: exact mean/covariance ODEs of the induced linear SDE;
//! - [`lyapunov_diagnostics`]: the score-space Lyapunov function, its drift
//!   under the flow, sign partitions, and a Fokker–Planck residual checker;
//! - [`estimation_oracle`]: conjugate/Kalman reference updates and the
//!   sequential flow filter;
//! - [`ensemble_stats`]: sample moments and standardized error measures.
//!
//! # Example
//!
//! A scalar measurement update: prior N(0, 1), measurement z = 1 with unit
//! noise, transported by a diffusive flow to the posterior N(0.5, 0.5).
//!
//! ```
//! use nalgebra::{DMatrix, DVector};
//! use flowfilt_core::ensemble_stats::sample_moments;
//! use flowfilt_core::flow_dynamics::DiffusionSchedule;
//! use flowfilt_core::quadratic_model::{Homotopy, QuadraticLogDensity};
//! use flowfilt_core::sde_integrator::{
//!     flow_to_posterior, sample_prior, IntegratorConfig, NullSink, Scheme,
//! };
//!
//! let prior = QuadraticLogDensity::gaussian_prior(
//!     &DVector::from_vec(vec![0.0]),
//!     &DMatrix::from_vec(1, 1, vec![1.0]),
//! )?;
//! let likelihood = QuadraticLogDensity::linear_gaussian_measurement(
//!     &DMatrix::from_vec(1, 1, vec![1.0]),  // H
//!     &DMatrix::from_vec(1, 1, vec![1.0]),  // R
//!     &DVector::from_vec(vec![1.0]),        // z
//! )?;
//! let hom = Homotopy::new(prior, likelihood)?;
//!
//! let schedule = DiffusionSchedule::scalar(0.5, 1)?;
//! let cfg = IntegratorConfig {
//!     steps: 500,
//!     scheme: Scheme::EulerMaruyama,
//!     seed: 7,
//!     record_every: 250,
//! };
//! let ensemble = sample_prior(&hom, 5_000, cfg.seed)?;
//! let transported = flow_to_posterior(ensemble, &hom, &schedule, &cfg, &mut NullSink)?;
//!
//! let sm = sample_moments(&transported)?;
//! let posterior = hom.posterior_moments(1.0)?;
//! assert!((sm.mean[0] - posterior.mean[0]).abs() < 0.05);
//! assert!((sm.covariance[(0, 0)] - posterior.covariance[(0, 0)]).abs() < 0.05);
//! # Ok::<(), flowfilt_core::FlowError>(())
//! ```

pub mod ensemble_stats;
pub mod error;
pub mod estimation_oracle;
pub mod flow_dynamics;
pub mod linalg;
pub mod lyapunov_diagnostics;
pub mod moment_odes;
pub mod quadratic_model;
pub mod rng;
pub mod sde_integrator;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{FlowError, Result};
