//! Ensemble propagation through pseudo-time λ ∈ [0, 1].
//!
//! Euler–Maruyama is the baseline scheme; when the diffusion is identically
//! zero the flow is an ODE and a fixed-step RK4 scheme is available for the
//! tight-tolerance conservation checks. Noise is drawn from counter-based
//! per-(particle, step) streams, so trajectories are bitwise reproducible for
//! a fixed seed regardless of how many threads execute the update.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{FlowError, Result};
use crate::flow_dynamics::{self, DiffusionSchedule, FlowCoefficients};
use crate::lyapunov_diagnostics::{self, DiagnosticsRecord};
use crate::quadratic_model::Homotopy;
use crate::rng::{NoiseStreams, DOMAIN_FLOW, DOMAIN_PRIOR};

/// Particles per parallel work block.
const BLOCK: usize = 1024;

/// N particles in ℝⁿ at a common λ. Column `i` of `states` is particle `i`;
/// `ids[i]` is its stable noise-stream identity.
#[derive(Debug, Clone)]
pub struct Ensemble {
    states: DMatrix<f64>,
    lambda: f64,
    ids: Vec<u64>,
}

impl Ensemble {
    /// Build from per-particle column vectors at the given λ, with stream
    /// identities `0..N`.
    pub fn from_particles(particles: Vec<DVector<f64>>, lambda: f64) -> Result<Self> {
        if particles.is_empty() {
            return Err(FlowError::InvalidConfig {
                reason: "ensemble needs at least one particle".into(),
            });
        }
        let n = particles[0].len();
        let mut states = DMatrix::zeros(n, particles.len());
        for (i, p) in particles.iter().enumerate() {
            if p.len() != n {
                return Err(FlowError::DimensionMismatch {
                    what: format!("particle {i}"),
                    expected: n,
                    found: p.len(),
                });
            }
            states.set_column(i, p);
        }
        Self::from_states(states, lambda)
    }

    pub fn from_states(states: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if states.ncols() == 0 || states.nrows() == 0 {
            return Err(FlowError::InvalidConfig {
                reason: "ensemble must be a nonempty n x N matrix".into(),
            });
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(FlowError::InvalidConfig {
                reason: format!("ensemble lambda {lambda} outside [0, 1]"),
            });
        }
        if let Some(flat) = states.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(FlowError::Divergence {
                particle_id: (flat / states.nrows()) as u64,
                lambda,
            });
        }
        let ids = (0..states.ncols() as u64).collect();
        Ok(Self {
            states,
            lambda,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// View of particle `i` as a column.
    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.states.column(i).into_owned()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.states
    }

    pub(crate) fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    fn parts_mut(&mut self) -> (&mut DMatrix<f64>, &[u64]) {
        (&mut self.states, &self.ids)
    }
}

/// Integration scheme for the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    /// RK4 on the drift ODE; only valid when the diffusion is identically 0.
    Rk4Deterministic,
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    /// Number of uniform λ steps.
    pub steps: usize,
    pub scheme: Scheme,
    pub seed: u64,
    /// Diagnostics are emitted every `record_every` steps (plus at λ = 1).
    pub record_every: usize,
}

impl IntegratorConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.steps == 0 {
            return Err(FlowError::InvalidConfig {
                reason: "steps must be at least 1".into(),
            });
        }
        if self.record_every == 0 {
            return Err(FlowError::InvalidConfig {
                reason: "record_every must be at least 1".into(),
            });
        }
        if self.scheme == Scheme::Rk4Deterministic && !schedule.is_zero() {
            return Err(FlowError::InvalidConfig {
                reason: "rk4_deterministic requires a zero diffusion schedule".into(),
            });
        }
        Ok(())
    }
}

/// Consumer for diagnostics batches emitted during integration.
pub trait DiagnosticsSink {
    fn accept(&mut self, batch: &[DiagnosticsRecord]);
}

/// Keeps every record in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<DiagnosticsRecord>,
}

impl DiagnosticsSink for MemorySink {
    fn accept(&mut self, batch: &[DiagnosticsRecord]) {
        self.records.extend_from_slice(batch);
    }
}

/// Discards all records.
#[derive(Debug, Default)]
pub struct NullSink;

impl DiagnosticsSink for NullSink {
    fn accept(&mut self, _batch: &[DiagnosticsRecord]) {}
}

/// Draw `n` particles from a Gaussian at λ = 0. Deterministic in `seed`.
pub fn sample_gaussian(
    moments: &crate::quadratic_model::PosteriorMoments,
    n: usize,
    seed: u64,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(FlowError::InvalidConfig {
            reason: "cannot sample an ensemble of zero particles".into(),
        });
    }
    let factor = crate::linalg::SpdFactor::new(&moments.covariance, "sampling covariance")?;
    let root = factor.sqrt_factor();
    let dim = moments.mean.len();
    let streams = NoiseStreams::new(seed, DOMAIN_PRIOR);
    let mut states = DMatrix::zeros(dim, n);
    states
        .as_mut_slice()
        .par_chunks_mut(dim * BLOCK)
        .enumerate()
        .for_each(|(block, chunk)| {
            let mut xi = DVector::zeros(dim);
            for (offset, col) in chunk.chunks_mut(dim).enumerate() {
                let id = (block * BLOCK + offset) as u64;
                let mut rng = streams.stream(id, 0);
                rng.fill_normal(&mut xi);
                let draw = &moments.mean + &root * &xi;
                col.copy_from_slice(draw.as_slice());
            }
        });
    Ensemble::from_states(states, 0.0)
}

/// Draw `n` particles from the prior at λ = 0. Deterministic in `seed`.
pub fn sample_prior(hom: &Homotopy, n: usize, seed: u64) -> Result<Ensemble> {
    sample_gaussian(&hom.prior_moments()?, n, seed)
}

/// Earliest (step, particle) at which a non-finite state appeared.
type Failure = (u64, usize);

/// Advance every particle through the Euler–Maruyama steps
/// `first_step .. first_step + table.len()`, one coefficient entry per step.
/// One parallel dispatch per call; values are identical regardless of
/// chunking because each (particle, step) noise stream is independent.
fn advance_euler(
    states: &mut DMatrix<f64>,
    ids: &[u64],
    table: &[FlowCoefficients],
    first_step: u64,
    d_lambda: f64,
    streams: &NoiseStreams,
) -> Option<Failure> {
    let n = states.nrows();
    let sqrt_dl = d_lambda.sqrt();
    if n == 1 {
        let scalar_table: Vec<(f64, f64, f64, bool)> = table
            .iter()
            .map(|c| {
                let m = c.noise_dim();
                let scale = if m > 0 {
                    c.q_factor[(0, 0)] * sqrt_dl
                } else {
                    0.0
                };
                (c.a[(0, 0)], c.b[0], scale, m > 0)
            })
            .collect();
        return states
            .as_mut_slice()
            .par_chunks_mut(BLOCK)
            .enumerate()
            .filter_map(|(block, chunk)| {
                let base = block * BLOCK;
                let mut worst: Option<Failure> = None;
                for (offset, x) in chunk.iter_mut().enumerate() {
                    let id = ids[base + offset];
                    for (k, &(a, b, scale, noisy)) in scalar_table.iter().enumerate() {
                        let step_index = first_step + k as u64;
                        let mut next = *x + d_lambda * (a * *x + b);
                        if noisy {
                            let mut rng = streams.stream(id, step_index);
                            next += scale * rng.normal();
                        }
                        *x = next;
                        if !next.is_finite() {
                            let failure = (step_index, base + offset);
                            if worst.is_none_or(|w| failure < w) {
                                worst = Some(failure);
                            }
                            break;
                        }
                    }
                }
                worst
            })
            .min();
    }
    states
        .as_mut_slice()
        .par_chunks_mut(n * BLOCK)
        .enumerate()
        .filter_map(|(block, chunk)| {
            let base = block * BLOCK;
            let mut drift = vec![0.0; n];
            let mut worst: Option<Failure> = None;
            for (offset, x) in chunk.chunks_mut(n).enumerate() {
                let id = ids[base + offset];
                for (k, coeffs) in table.iter().enumerate() {
                    let a = coeffs.a.as_slice();
                    let b = coeffs.b.as_slice();
                    let q = coeffs.q_factor.as_slice();
                    let m = coeffs.noise_dim();
                    for i in 0..n {
                        let mut acc = b[i];
                        for j in 0..n {
                            acc += a[j * n + i] * x[j];
                        }
                        drift[i] = acc;
                    }
                    for i in 0..n {
                        x[i] += d_lambda * drift[i];
                    }
                    if m > 0 {
                        let step_index = first_step + k as u64;
                        let mut rng = streams.stream(id, step_index);
                        for col in 0..m {
                            let xi = rng.normal() * sqrt_dl;
                            for i in 0..n {
                                x[i] += q[col * n + i] * xi;
                            }
                        }
                    }
                    if x.iter().any(|v| !v.is_finite()) {
                        let failure = (first_step + k as u64, base + offset);
                        if worst.is_none_or(|w| failure < w) {
                            worst = Some(failure);
                        }
                        break;
                    }
                }
            }
            worst
        })
        .min()
}

/// One Euler–Maruyama step of size `d_lambda`:
/// `xᵢ ← xᵢ + f(xᵢ, λ) dλ + q(λ) ξᵢ √dλ` with `ξᵢ ~ N(0, I_m)` from particle
/// `i`'s noise stream at `step_index`.
pub fn step(
    ens: &Ensemble,
    hom: &Homotopy,
    schedule: &DiffusionSchedule,
    d_lambda: f64,
    streams: &NoiseStreams,
    step_index: u64,
) -> Result<Ensemble> {
    if ens.lambda + d_lambda > 1.0 + 1e-12 {
        return Err(FlowError::InvalidConfig {
            reason: format!(
                "step of {d_lambda} from lambda={} leaves [0, 1]",
                ens.lambda
            ),
        });
    }
    let coeffs = flow_dynamics::flow_coefficients(hom, ens.lambda, schedule)?;
    let mut next = ens.clone();
    let lambda = ens.lambda + d_lambda;
    let (states, ids) = next.parts_mut();
    if let Some((_, particle)) = advance_euler(
        states,
        ids,
        std::slice::from_ref(&coeffs),
        step_index,
        d_lambda,
        streams,
    ) {
        return Err(FlowError::Divergence {
            particle_id: next.ids[particle],
            lambda,
        });
    }
    next.lambda = lambda;
    Ok(next)
}

/// RK4 stage coefficients for one deterministic step.
struct Rk4Stage {
    c0: FlowCoefficients,
    chalf: FlowCoefficients,
    c1: FlowCoefficients,
}

fn advance_rk4(
    states: &mut DMatrix<f64>,
    table: &[Rk4Stage],
    first_step: u64,
    h: f64,
) -> Option<Failure> {
    let n = states.nrows();
    if n == 1 {
        let scalar_table: Vec<[f64; 6]> = table
            .iter()
            .map(|s| {
                [
                    s.c0.a[(0, 0)],
                    s.c0.b[0],
                    s.chalf.a[(0, 0)],
                    s.chalf.b[0],
                    s.c1.a[(0, 0)],
                    s.c1.b[0],
                ]
            })
            .collect();
        return states
            .as_mut_slice()
            .par_chunks_mut(BLOCK)
            .enumerate()
            .filter_map(|(block, chunk)| {
                let base = block * BLOCK;
                let mut worst: Option<Failure> = None;
                for (offset, x) in chunk.iter_mut().enumerate() {
                    for (k, &[a0, b0, ah, bh, a1, b1]) in scalar_table.iter().enumerate() {
                        let k1 = a0 * *x + b0;
                        let k2 = ah * (*x + 0.5 * h * k1) + bh;
                        let k3 = ah * (*x + 0.5 * h * k2) + bh;
                        let k4 = a1 * (*x + h * k3) + b1;
                        *x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                        if !x.is_finite() {
                            let failure = (first_step + k as u64, base + offset);
                            if worst.is_none_or(|w| failure < w) {
                                worst = Some(failure);
                            }
                            break;
                        }
                    }
                }
                worst
            })
            .min();
    }
    states
        .as_mut_slice()
        .par_chunks_mut(n * BLOCK)
        .enumerate()
        .filter_map(|(block, chunk)| {
            let base = block * BLOCK;
            let mut scratch = vec![0.0; 5 * n];
            let mut worst: Option<Failure> = None;
            for (offset, x) in chunk.chunks_mut(n).enumerate() {
                for (step, stage) in table.iter().enumerate() {
                    let (k1, rest) = scratch.split_at_mut(n);
                    let (k2, rest) = rest.split_at_mut(n);
                    let (k3, rest) = rest.split_at_mut(n);
                    let (k4, tmp) = rest.split_at_mut(n);
                    affine(&stage.c0, x, k1);
                    for i in 0..n {
                        tmp[i] = x[i] + 0.5 * h * k1[i];
                    }
                    affine(&stage.chalf, tmp, k2);
                    for i in 0..n {
                        tmp[i] = x[i] + 0.5 * h * k2[i];
                    }
                    affine(&stage.chalf, tmp, k3);
                    for i in 0..n {
                        tmp[i] = x[i] + h * k3[i];
                    }
                    affine(&stage.c1, tmp, k4);
                    for i in 0..n {
                        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                    if x.iter().any(|v| !v.is_finite()) {
                        let failure = (first_step + step as u64, base + offset);
                        if worst.is_none_or(|w| failure < w) {
                            worst = Some(failure);
                        }
                        break;
                    }
                }
            }
            worst
        })
        .min()
}

fn affine(coeffs: &FlowCoefficients, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let a = coeffs.a.as_slice();
    for i in 0..n {
        let mut acc = coeffs.b[i];
        for j in 0..n {
            acc += a[j * n + i] * x[j];
        }
        out[i] = acc;
    }
}

/// Integrate the ensemble from λ = 0 to λ = 1 over `cfg.steps` uniform steps,
/// emitting a diagnostics batch every `cfg.record_every` steps and at λ = 1.
pub fn flow_to_posterior(
    ens0: Ensemble,
    hom: &Homotopy,
    schedule: &DiffusionSchedule,
    cfg: &IntegratorConfig,
    sink: &mut dyn DiagnosticsSink,
) -> Result<Ensemble> {
    cfg.validate(schedule)?;
    if ens0.lambda.abs() > 1e-12 {
        return Err(FlowError::InvalidConfig {
            reason: format!("flow must start at lambda=0, got {}", ens0.lambda),
        });
    }
    if ens0.dim() != hom.dim() {
        return Err(FlowError::DimensionMismatch {
            what: "ensemble dimension".into(),
            expected: hom.dim(),
            found: ens0.dim(),
        });
    }
    let steps = cfg.steps;
    let h = 1.0 / steps as f64;
    let streams = NoiseStreams::new(cfg.seed, DOMAIN_FLOW);
    let mut ens = ens0;
    // Advance in segments between record points: coefficients for the whole
    // segment are tabulated first, then every particle marches through it in
    // a single parallel pass.
    let mut s = 0usize;
    while s < steps {
        let lambda = s as f64 / steps as f64;
        ens.set_lambda(lambda);
        if s.is_multiple_of(cfg.record_every) {
            let batch = lyapunov_diagnostics::record(hom, &ens, &schedule.q_at(lambda))?;
            sink.accept(&batch);
        }
        let segment_end = ((s / cfg.record_every + 1).saturating_mul(cfg.record_every)).min(steps);
        let failure = match cfg.scheme {
            Scheme::EulerMaruyama => {
                let table: Vec<_> = (s..segment_end)
                    .map(|k| {
                        flow_dynamics::flow_coefficients(hom, k as f64 / steps as f64, schedule)
                    })
                    .collect::<Result<_>>()?;
                let (states, ids) = ens.parts_mut();
                advance_euler(states, ids, &table, s as u64, h, &streams)
            }
            Scheme::Rk4Deterministic => {
                let table: Vec<_> = (s..segment_end)
                    .map(|k| -> Result<Rk4Stage> {
                        let lo = k as f64 / steps as f64;
                        let hi = ((k + 1) as f64 / steps as f64).min(1.0);
                        Ok(Rk4Stage {
                            c0: flow_dynamics::flow_coefficients(hom, lo, schedule)?,
                            chalf: flow_dynamics::flow_coefficients(hom, lo + 0.5 * h, schedule)?,
                            c1: flow_dynamics::flow_coefficients(hom, hi, schedule)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                advance_rk4(ens.states_mut(), &table, s as u64, h)
            }
        };
        if let Some((failed_step, particle)) = failure {
            return Err(FlowError::Divergence {
                particle_id: ens.ids[particle],
                lambda: (failed_step + 1) as f64 / steps as f64,
            });
        }
        s = segment_end;
    }
    ens.set_lambda(1.0);
    let batch = lyapunov_diagnostics::record(hom, &ens, &schedule.q_at(1.0))?;
    sink.accept(&batch);
    Ok(ens)
}
