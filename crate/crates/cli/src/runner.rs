//! Scenario execution: wires configuration into the core library, streams
//! diagnostics to the trace CSV, and assembles the run summary.

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use flowfilt_core::ensemble_stats;
use flowfilt_core::error::FlowError;
use flowfilt_core::estimation_oracle::{kalman_filter_recursion, sequential_flow_filter_with_sink};
use flowfilt_core::lyapunov_diagnostics::{DiagnosticsRecord, Partition};
use flowfilt_core::quadratic_model::PosteriorMoments;
use flowfilt_core::sde_integrator::{
    flow_to_posterior, sample_prior, DiagnosticsSink, Ensemble, IntegratorConfig,
};

use crate::config::{Mode, RunPlan};
use crate::output::{trace_header, write_trace_row, MomentsOut, PartitionOccupancy, RunSummary};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    NonFinite(String),
}

#[derive(Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
}

/// λ values at which partition occupancy is reported.
const OCCUPANCY_TARGETS: [f64; 3] = [0.0, 0.5, 1.0];

struct OccupancySlot {
    target: f64,
    best_dist: f64,
    lambda: f64,
    counts: [usize; 3],
}

/// Streams every record to the CSV writer while folding the summary
/// statistics that are defined on the recorded grid.
struct TraceSink<W: Write> {
    writer: W,
    initial_v: Vec<f64>,
    v_drift_max: f64,
    gamma_min: f64,
    gamma_max: f64,
    occupancy: Vec<OccupancySlot>,
    rows: usize,
    io_error: Option<io::Error>,
}

impl<W: Write> TraceSink<W> {
    fn new(mut writer: W, dim: usize) -> io::Result<Self> {
        writeln!(writer, "{}", trace_header(dim))?;
        Ok(Self {
            writer,
            initial_v: Vec::new(),
            v_drift_max: 0.0,
            gamma_min: f64::INFINITY,
            gamma_max: f64::NEG_INFINITY,
            occupancy: OCCUPANCY_TARGETS
                .iter()
                .map(|&target| OccupancySlot {
                    target,
                    best_dist: f64::INFINITY,
                    lambda: f64::NAN,
                    counts: [0; 3],
                })
                .collect(),
            rows: 0,
            io_error: None,
        })
    }

    fn finish(mut self) -> io::Result<TraceStats> {
        if let Some(e) = self.io_error.take() {
            return Err(e);
        }
        self.writer.flush()?;
        Ok(TraceStats {
            v_drift_max: (!self.initial_v.is_empty()).then_some(self.v_drift_max),
            gamma_min: (self.rows > 0).then_some(self.gamma_min),
            gamma_max: (self.rows > 0).then_some(self.gamma_max),
            occupancy: self
                .occupancy
                .iter()
                .filter(|slot| slot.best_dist.is_finite())
                .map(|slot| PartitionOccupancy {
                    lambda: slot.lambda,
                    s1: slot.counts[0],
                    s2: slot.counts[1],
                    s3: slot.counts[2],
                })
                .collect(),
        })
    }
}

struct TraceStats {
    v_drift_max: Option<f64>,
    gamma_min: Option<f64>,
    gamma_max: Option<f64>,
    occupancy: Vec<PartitionOccupancy>,
}

impl<W: Write> DiagnosticsSink for TraceSink<W> {
    fn accept(&mut self, batch: &[DiagnosticsRecord]) {
        if self.io_error.is_some() || batch.is_empty() {
            return;
        }
        if self.initial_v.is_empty() {
            self.initial_v = vec![f64::NAN; batch.len()];
            for record in batch {
                if let Some(slot) = self.initial_v.get_mut(record.particle_id as usize) {
                    *slot = record.v;
                }
            }
        }
        let lambda = batch[0].lambda;
        let mut counts = [0usize; 3];
        for record in batch {
            match record.partition {
                Partition::S1 => counts[0] += 1,
                Partition::S2 => counts[1] += 1,
                Partition::S3 => counts[2] += 1,
            }
            self.gamma_min = self.gamma_min.min(record.gamma);
            self.gamma_max = self.gamma_max.max(record.gamma);
            if let Some(&v0) = self.initial_v.get(record.particle_id as usize) {
                if v0.is_finite() {
                    self.v_drift_max = self.v_drift_max.max((record.v - v0).abs() / v0.max(1e-12));
                }
            }
            if let Err(e) = write_trace_row(&mut self.writer, record) {
                self.io_error = Some(e);
                return;
            }
            self.rows += 1;
        }
        for slot in &mut self.occupancy {
            let dist = (lambda - slot.target).abs();
            if dist < slot.best_dist {
                slot.best_dist = dist;
                slot.lambda = lambda;
                slot.counts = counts;
            }
        }
    }
}

fn resolve(path: Option<&PathBuf>, default_name: &str, out_dir: &Path) -> PathBuf {
    match path {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => out_dir.join(p),
        None => out_dir.join(default_name),
    }
}

/// Execute a validated plan, writing the trace CSV and summary JSON under
/// `out_dir`. On a flow failure the summary (with the error recorded) is
/// still written before the error is returned.
pub fn run(plan: &RunPlan, out_dir: &Path) -> Result<RunOutcome, RunnerError> {
    std::fs::create_dir_all(out_dir)?;
    let trace_path = resolve(
        plan.trace_path.as_ref(),
        &format!("{}_{}_trace.csv", plan.name, plan.seed),
        out_dir,
    );
    let summary_path = resolve(
        plan.summary_path.as_ref(),
        &format!("{}_{}_summary.json", plan.name, plan.seed),
        out_dir,
    );

    let started = Instant::now();
    let file = std::fs::File::create(&trace_path)?;
    let mut sink = TraceSink::new(BufWriter::new(file), plan.dimension)?;

    let result = execute(plan, &mut sink);
    let duration = started.elapsed().as_secs_f64();

    match result {
        Ok(body) => {
            let stats = sink.finish()?;
            let summary = RunSummary {
                scenario: plan.name.clone(),
                seed: plan.seed,
                mode: plan.mode.as_str().to_string(),
                particles: plan.particles,
                final_sample_moments: body.final_sample_moments,
                reference_posterior: body.reference_posterior,
                mahalanobis_gap: body.mahalanobis_gap,
                covariance_gap: body.covariance_gap,
                exact_flow_v_drift: plan
                    .schedule
                    .is_zero()
                    .then_some(stats.v_drift_max)
                    .flatten(),
                gamma_min: stats.gamma_min,
                gamma_max: stats.gamma_max,
                partition_occupancy: stats.occupancy,
                duration_seconds: duration,
                error: None,
            };
            if let Err(message) = summary.check_finite() {
                error_summary(plan, duration, &message).write_json(&summary_path)?;
                return Err(RunnerError::NonFinite(message));
            }
            summary.write_json(&summary_path)?;
            Ok(RunOutcome {
                summary,
                trace_path,
                summary_path,
            })
        }
        Err(flow_error) => {
            error_summary(plan, duration, &flow_error.to_string()).write_json(&summary_path)?;
            Err(RunnerError::Flow(flow_error))
        }
    }
}

fn error_summary(plan: &RunPlan, duration: f64, message: &str) -> RunSummary {
    RunSummary {
        scenario: plan.name.clone(),
        seed: plan.seed,
        mode: plan.mode.as_str().to_string(),
        particles: plan.particles,
        final_sample_moments: None,
        reference_posterior: None,
        mahalanobis_gap: None,
        covariance_gap: None,
        exact_flow_v_drift: None,
        gamma_min: None,
        gamma_max: None,
        partition_occupancy: Vec::new(),
        duration_seconds: duration,
        error: Some(message.to_string()),
    }
}

struct RunBody {
    final_sample_moments: Option<MomentsOut>,
    reference_posterior: Option<MomentsOut>,
    mahalanobis_gap: Option<f64>,
    covariance_gap: Option<f64>,
}

fn execute(plan: &RunPlan, sink: &mut dyn DiagnosticsSink) -> Result<RunBody, FlowError> {
    match plan.mode {
        Mode::SingleUpdate | Mode::DiagnosticsSweep => {
            let ensemble = match &plan.initial_particles {
                Some(pinned) => Ensemble::from_particles(pinned.clone(), 0.0)?,
                None => sample_prior(&plan.homotopy, plan.particles, plan.integrator.seed)?,
            };
            let cfg = IntegratorConfig {
                record_every: match plan.mode {
                    Mode::DiagnosticsSweep => 1,
                    _ => plan.integrator.record_every,
                },
                ..plan.integrator.clone()
            };
            let finals = flow_to_posterior(ensemble, &plan.homotopy, &plan.schedule, &cfg, sink)?;
            let reference = plan.homotopy.posterior_moments(1.0)?;
            let body = gaps_against(&finals, &reference)?;
            Ok(body)
        }
        Mode::Sequential => {
            let seq = plan
                .sequential
                .as_ref()
                .expect("sequential plan validated at load");
            let record_step = seq.measurements.len().checked_sub(1);
            let steps = sequential_flow_filter_with_sink(
                &plan.init_moments,
                &seq.dynamics,
                &seq.measurement,
                &seq.measurements,
                &plan.schedule,
                &plan.integrator,
                plan.particles,
                sink,
                record_step,
            )?;
            match steps.last() {
                None => Ok(RunBody {
                    final_sample_moments: None,
                    reference_posterior: None,
                    mahalanobis_gap: None,
                    covariance_gap: None,
                }),
                Some(last) => {
                    let reference = kalman_filter_recursion(
                        &plan.init_moments,
                        &seq.dynamics,
                        &seq.measurement,
                        &seq.measurements,
                    )?
                    .pop()
                    .expect("nonempty measurement list");
                    gaps_against(&last.ensemble, &reference)
                }
            }
        }
    }
}

fn gaps_against(ensemble: &Ensemble, reference: &PosteriorMoments) -> Result<RunBody, FlowError> {
    let reference_out = Some(MomentsOut::from_moments(reference));
    if ensemble.len() < 2 {
        return Ok(RunBody {
            final_sample_moments: None,
            reference_posterior: reference_out,
            mahalanobis_gap: None,
            covariance_gap: None,
        });
    }
    let sm = ensemble_stats::sample_moments(ensemble)?;
    let mahalanobis = ensemble_stats::mahalanobis_gap(&sm, reference)?;
    let covariance = ensemble_stats::covariance_gap(&sm, reference)?;
    Ok(RunBody {
        final_sample_moments: Some(MomentsOut {
            mean: sm.mean.iter().copied().collect(),
            covariance: (0..sm.covariance.nrows())
                .map(|i| {
                    (0..sm.covariance.ncols())
                        .map(|j| sm.covariance[(i, j)])
                        .collect()
                })
                .collect(),
        }),
        reference_posterior: reference_out,
        mahalanobis_gap: Some(mahalanobis),
        covariance_gap: Some(covariance),
    })
}
