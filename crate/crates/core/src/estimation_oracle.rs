//! Closed-form Bayesian references and the sequential flow filter.
//!
//! `conjugate_posterior` and `kalman_update` are two algebraic routes to the
//! same Gaussian measurement update; they must agree and are used to verify
//! the flow-transported ensembles. `sequential_flow_filter` chains
//! linear-Gaussian prediction with a particle-flow measurement update per
//! measurement, carrying the per-step prior analytically so each update sees
//! an exactly quadratic model.

use nalgebra::{DMatrix, DVector};

use crate::ensemble_stats;
use crate::error::{FlowError, Result};
use crate::flow_dynamics::{psd_factor, DiffusionSchedule};
use crate::linalg::{self, SpdFactor};
use crate::quadratic_model::{Homotopy, PosteriorMoments, QuadraticLogDensity};
use crate::rng::{derive_seed, NoiseStreams, DOMAIN_PROCESS};
use crate::sde_integrator::{
    flow_to_posterior, sample_gaussian, DiagnosticsSink, Ensemble, IntegratorConfig, NullSink,
};

/// Linear state transition `x' = F x + w`, `w ~ N(0, W)`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    f: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(f: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        if f.nrows() != f.ncols() {
            return Err(FlowError::DimensionMismatch {
                what: "transition F (must be square)".into(),
                expected: f.nrows(),
                found: f.ncols(),
            });
        }
        if w.nrows() != f.nrows() || w.ncols() != f.nrows() {
            return Err(FlowError::DimensionMismatch {
                what: "process noise W".into(),
                expected: f.nrows(),
                found: w.nrows(),
            });
        }
        let min_eig = linalg::min_eigenvalue(&w);
        if min_eig < -1e-10 * linalg::max_abs(&w).max(1.0) {
            return Err(FlowError::NotPositiveSemiDefinite {
                what: "process noise W".into(),
                min_eig,
                tol: 1e-10,
            });
        }
        Ok(Self {
            f,
            w: linalg::symmetrized(&w),
        })
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.w
    }
}

/// Linear measurement `z = H x + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl MeasurementModel {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(FlowError::DimensionMismatch {
                what: "measurement noise R".into(),
                expected: h.nrows(),
                found: r.nrows(),
            });
        }
        SpdFactor::new(&r, "measurement noise R")?;
        Ok(Self {
            h,
            r: linalg::symmetrized(&r),
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }

    /// The quadratic log-likelihood of observing `z`.
    pub fn likelihood(&self, z: &DVector<f64>) -> Result<QuadraticLogDensity> {
        QuadraticLogDensity::linear_gaussian_measurement(&self.h, &self.r, z)
    }
}

/// Posterior from prior moments and a quadratic log-likelihood:
/// `cov = (Σ⁻¹ − A_h)⁻¹`, `mean = cov (Σ⁻¹ μ + b_h)`.
pub fn conjugate_posterior(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    likelihood: &QuadraticLogDensity,
) -> Result<PosteriorMoments> {
    let prior_precision = SpdFactor::new(prior_cov, "prior covariance")?.inverse();
    let posterior_precision = &prior_precision - likelihood.a();
    let factor =
        SpdFactor::new(&posterior_precision, "posterior precision").map_err(|e| match e {
            FlowError::NotPositiveDefinite { min_eig, .. } => {
                FlowError::ImproperPosterior { min_eig }
            }
            other => other,
        })?;
    let mean = factor.solve(&(&prior_precision * prior_mean + likelihood.b()));
    Ok(PosteriorMoments {
        mean,
        covariance: factor.inverse(),
    })
}

/// Gain-form Kalman measurement update (Joseph-stabilized covariance).
pub fn kalman_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    mm: &MeasurementModel,
    z: &DVector<f64>,
) -> Result<PosteriorMoments> {
    if z.len() != mm.measurement_dim() {
        return Err(FlowError::DimensionMismatch {
            what: "measurement z".into(),
            expected: mm.measurement_dim(),
            found: z.len(),
        });
    }
    let h = &mm.h;
    let innovation_cov = h * cov * h.transpose() + &mm.r;
    let factor = SpdFactor::new(&innovation_cov, "innovation covariance")?;
    let gain = cov * h.transpose() * factor.inverse();
    let updated_mean = mean + &gain * (z - h * mean);
    let n = mean.len();
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let cov = &i_kh * cov * i_kh.transpose() + &gain * &mm.r * gain.transpose();
    Ok(PosteriorMoments {
        mean: updated_mean,
        covariance: linalg::symmetrized(&cov),
    })
}

/// Linear-Gaussian prediction of the moments: `(F m, F P Fᵀ + W)`.
pub fn kalman_predict(moments: &PosteriorMoments, dynamics: &LinearDynamics) -> PosteriorMoments {
    PosteriorMoments {
        mean: &dynamics.f * &moments.mean,
        covariance: linalg::symmetrized(
            &(&dynamics.f * &moments.covariance * dynamics.f.transpose() + &dynamics.w),
        ),
    }
}

/// Exact Kalman filter over a measurement sequence; the closed-form
/// reference the flow filter is judged against.
pub fn kalman_filter_recursion(
    init: &PosteriorMoments,
    dynamics: &LinearDynamics,
    mm: &MeasurementModel,
    measurements: &[DVector<f64>],
) -> Result<Vec<PosteriorMoments>> {
    let mut current = init.clone();
    let mut out = Vec::with_capacity(measurements.len());
    for (k, z) in measurements.iter().enumerate() {
        let predicted = kalman_predict(&current, dynamics);
        current = kalman_update(&predicted.mean, &predicted.covariance, mm, z)
            .map_err(|e| e.at_step(k))?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Transport each particle through the dynamics: `xᵢ ← F xᵢ + wᵢ` with
/// per-particle counter-based process noise. Returns an ensemble at λ = 0.
pub fn predict_ensemble(ens: &Ensemble, dynamics: &LinearDynamics, seed: u64) -> Result<Ensemble> {
    let noise_factor = psd_factor(&dynamics.w)?;
    let m = noise_factor.ncols();
    let streams = NoiseStreams::new(seed, DOMAIN_PROCESS);
    let mut states = &dynamics.f * ens.states();
    if m > 0 {
        let mut xi = DVector::zeros(m);
        for (i, mut col) in states.column_iter_mut().enumerate() {
            let mut rng = streams.stream(ens.ids()[i], 0);
            rng.fill_normal(&mut xi);
            col += &noise_factor * &xi;
        }
    }
    Ensemble::from_states(states, 0.0)
}

/// One step of the sequential filter: the flow-transported ensemble and its
/// sample-moment estimate, plus the analytically maintained posterior.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub estimate: PosteriorMoments,
    pub ensemble: Ensemble,
    pub analytic: PosteriorMoments,
}

/// Sequential Bayes with particle-flow measurement updates.
///
/// Per measurement `k`: (i) particles move through the dynamics with fresh
/// process noise; (ii) the analytic moments are predicted and define the
/// step's Gaussian prior; (iii) the flow transports the ensemble through the
/// measurement update; (iv) the ensemble's sample moments are reported as
/// the estimate. The analytic recursion (not the sample fit) seeds the next
/// step's prior.
pub fn sequential_flow_filter(
    init: &PosteriorMoments,
    dynamics: &LinearDynamics,
    mm: &MeasurementModel,
    measurements: &[DVector<f64>],
    schedule: &DiffusionSchedule,
    cfg: &IntegratorConfig,
    n_particles: usize,
) -> Result<Vec<FilterStep>> {
    sequential_flow_filter_with_sink(
        init,
        dynamics,
        mm,
        measurements,
        schedule,
        cfg,
        n_particles,
        &mut NullSink,
        None,
    )
}

/// As [`sequential_flow_filter`], recording flow diagnostics for the single
/// measurement step `record_step` (if given) into `sink`.
#[allow(clippy::too_many_arguments)]
pub fn sequential_flow_filter_with_sink(
    init: &PosteriorMoments,
    dynamics: &LinearDynamics,
    mm: &MeasurementModel,
    measurements: &[DVector<f64>],
    schedule: &DiffusionSchedule,
    cfg: &IntegratorConfig,
    n_particles: usize,
    sink: &mut dyn DiagnosticsSink,
    record_step: Option<usize>,
) -> Result<Vec<FilterStep>> {
    let mut ensemble = sample_gaussian(init, n_particles, cfg.seed)?;
    let mut analytic = init.clone();
    let mut out = Vec::with_capacity(measurements.len());
    for (k, z) in measurements.iter().enumerate() {
        let step_seed = derive_seed(cfg.seed, k as u64);
        ensemble = predict_ensemble(&ensemble, dynamics, step_seed).map_err(|e| e.at_step(k))?;
        let predicted = kalman_predict(&analytic, dynamics);

        let prior = QuadraticLogDensity::gaussian_prior(&predicted.mean, &predicted.covariance)
            .map_err(|e| e.at_step(k))?;
        let likelihood = mm.likelihood(z).map_err(|e| e.at_step(k))?;
        let hom = Homotopy::new(prior, likelihood).map_err(|e| e.at_step(k))?;

        let step_cfg = IntegratorConfig {
            seed: step_seed,
            ..cfg.clone()
        };
        let mut null = NullSink;
        let step_sink: &mut dyn DiagnosticsSink = if record_step == Some(k) {
            &mut *sink
        } else {
            &mut null
        };
        ensemble = flow_to_posterior(ensemble, &hom, schedule, &step_cfg, step_sink)
            .map_err(|e| e.at_step(k))?;

        analytic = conjugate_posterior(&predicted.mean, &predicted.covariance, hom.likelihood())
            .map_err(|e| e.at_step(k))?;
        let sm = ensemble_stats::sample_moments(&ensemble).map_err(|e| e.at_step(k))?;
        out.push(FilterStep {
            estimate: PosteriorMoments {
                mean: sm.mean,
                covariance: sm.covariance,
            },
            ensemble: ensemble.clone(),
            analytic: analytic.clone(),
        });
    }
    Ok(out)
}
