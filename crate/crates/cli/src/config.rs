//! Scenario configuration: JSON schema, loading, and validation.
//!
//! Validation is exhaustive: every problem in the file is reported, not just
//! the first. Matrices are row-major nested arrays.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use flowfilt_core::estimation_oracle::{LinearDynamics, MeasurementModel};
use flowfilt_core::flow_dynamics::DiffusionSchedule;
use flowfilt_core::linalg;
use flowfilt_core::quadratic_model::{Homotopy, PosteriorMoments, QuadraticLogDensity};
use flowfilt_core::sde_integrator::{IntegratorConfig, Scheme};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub dimension: usize,
    pub prior: PriorConfig,
    pub likelihood: LikelihoodConfig,
    pub diffusion: DiffusionConfig,
    pub particles: usize,
    pub integrator: IntegratorSection,
    pub mode: Mode,
    #[serde(default)]
    pub sequential: Option<SequentialSection>,
    /// Pinned initial particles (row per particle); overrides prior sampling.
    #[serde(default)]
    pub initial_particles: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum LikelihoodConfig {
    Linear {
        #[serde(rename = "H")]
        h: Vec<Vec<f64>>,
        #[serde(rename = "R")]
        r: Vec<Vec<f64>>,
        z: Vec<f64>,
    },
    Raw {
        #[serde(rename = "A_h")]
        a_h: Vec<Vec<f64>>,
        b_h: Vec<f64>,
        c_h: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum DiffusionConfig {
    /// The string `"zero"`.
    Keyword(String),
    Tagged(DiffusionTagged),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTagged {
    #[serde(default)]
    pub constant: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub scalar: Option<f64>,
    #[serde(default)]
    pub knots: Option<Vec<DiffusionKnot>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionKnot {
    pub lambda: f64,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub steps: usize,
    pub scheme: SchemeConfig,
    /// Defaults to `ceil(steps / 2)`, which records λ = 0, ½, 1.
    #[serde(default)]
    pub record_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeConfig {
    EulerMaruyama,
    Rk4Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleUpdate,
    Sequential,
    DiagnosticsSweep,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SingleUpdate => "single_update",
            Mode::Sequential => "sequential",
            Mode::DiagnosticsSweep => "diagnostics_sweep",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequentialSection {
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub measurements: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub summary: Option<PathBuf>,
}

/// A fully validated, executable scenario.
#[derive(Debug)]
pub struct RunPlan {
    pub name: String,
    pub seed: u64,
    pub dimension: usize,
    pub homotopy: Homotopy,
    pub init_moments: PosteriorMoments,
    pub schedule: DiffusionSchedule,
    pub integrator: IntegratorConfig,
    pub particles: usize,
    pub mode: Mode,
    pub initial_particles: Option<Vec<DVector<f64>>>,
    pub sequential: Option<SequentialPlan>,
    pub trace_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct SequentialPlan {
    pub dynamics: LinearDynamics,
    pub measurement: MeasurementModel,
    pub measurements: Vec<DVector<f64>>,
}

impl RunPlan {
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.integrator.seed = seed;
    }
}

/// Load and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<RunPlan, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config: ScenarioConfig = serde_json::from_str(&text).map_err(|e| LoadError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate(config)
}

fn matrix_from_rows(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    what: &str,
    issues: &mut Vec<String>,
) -> Option<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        issues.push(format!(
            "{what} must be {nrows}x{ncols}, found {}x{}",
            rows.len(),
            rows.first().map_or(0, |r| r.len())
        ));
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Validate a parsed config, reporting every failure.
pub fn validate(config: ScenarioConfig) -> Result<RunPlan, LoadError> {
    let mut issues = Vec::new();
    let n = config.dimension;
    if n == 0 {
        issues.push("dimension must be at least 1".to_string());
        return Err(LoadError::Invalid(issues));
    }

    // prior
    if config.prior.mean.len() != n {
        issues.push(format!(
            "prior.mean has length {}, expected dimension {n}",
            config.prior.mean.len()
        ));
    }
    let prior_cov = matrix_from_rows(
        &config.prior.covariance,
        n,
        n,
        "prior.covariance",
        &mut issues,
    );
    let prior_mean = DVector::from_vec(config.prior.mean.clone());
    let prior = prior_cov.as_ref().and_then(|cov| {
        if prior_mean.len() != n {
            return None;
        }
        match QuadraticLogDensity::gaussian_prior(&prior_mean, cov) {
            Ok(d) => Some(d),
            Err(e) => {
                issues.push(format!("prior.covariance not positive definite: {e}"));
                None
            }
        }
    });

    // likelihood
    let mut measurement_model = None;
    let mut measurement_z = None;
    let likelihood = match &config.likelihood {
        LikelihoodConfig::Linear { h, r, z } => {
            let d = h.len();
            let h_mat = matrix_from_rows(h, d.max(1), n, "likelihood.H", &mut issues);
            let r_mat = matrix_from_rows(r, d.max(1), d.max(1), "likelihood.R", &mut issues);
            if z.len() != d {
                issues.push(format!(
                    "likelihood.z has length {}, expected {d} (rows of H)",
                    z.len()
                ));
            }
            match (h_mat, r_mat) {
                (Some(h_mat), Some(r_mat)) if z.len() == d => {
                    let z_vec = DVector::from_vec(z.clone());
                    match MeasurementModel::new(h_mat.clone(), r_mat.clone()) {
                        Ok(mm) => {
                            let lik = mm.likelihood(&z_vec).expect("dimensions already checked");
                            measurement_model = Some(mm);
                            measurement_z = Some(z_vec);
                            Some(lik)
                        }
                        Err(_) => {
                            let min_eig = linalg::min_eigenvalue(&r_mat);
                            issues.push(format!(
                                "likelihood.R not positive definite (min eigenvalue {min_eig:.6e})"
                            ));
                            None
                        }
                    }
                }
                _ => None,
            }
        }
        LikelihoodConfig::Raw { a_h, b_h, c_h } => {
            let a = matrix_from_rows(a_h, n, n, "likelihood.A_h", &mut issues);
            if b_h.len() != n {
                issues.push(format!(
                    "likelihood.b_h has length {}, expected dimension {n}",
                    b_h.len()
                ));
            }
            a.and_then(|a| {
                if b_h.len() != n {
                    return None;
                }
                let max_eig = -linalg::min_eigenvalue(&(-a.clone()));
                if max_eig > 1e-10 * linalg::max_abs(&a).max(1.0) {
                    issues.push(format!(
                        "(A3) violated: likelihood.A_h has eigenvalue {max_eig:+.6e} > 0 \
                         (must be negative semi-definite)"
                    ));
                    return None;
                }
                match QuadraticLogDensity::new(a, DVector::from_vec(b_h.clone()), *c_h) {
                    Ok(d) => Some(d),
                    Err(e) => {
                        issues.push(format!("likelihood coefficients rejected: {e}"));
                        None
                    }
                }
            })
        }
    };

    // homotopy: (A3) as a whole
    let homotopy = match (prior, likelihood) {
        (Some(g), Some(h)) => match Homotopy::new(g, h) {
            Ok(hom) => Some(hom),
            Err(e) => {
                issues.push(format!("(A3) violated: {e}"));
                None
            }
        },
        _ => None,
    };

    // diffusion
    let schedule = match &config.diffusion {
        DiffusionConfig::Keyword(word) if word == "zero" => Some(DiffusionSchedule::zero(n)),
        DiffusionConfig::Keyword(word) => {
            issues.push(format!(
                "diffusion keyword \"{word}\" not recognized (only \"zero\")"
            ));
            None
        }
        DiffusionConfig::Tagged(tagged) => {
            let picked = [
                tagged.constant.is_some(),
                tagged.scalar.is_some(),
                tagged.knots.is_some(),
            ]
            .iter()
            .filter(|&&b| b)
            .count();
            if picked != 1 {
                issues.push(
                    "diffusion must be \"zero\" or exactly one of {constant, scalar, knots}"
                        .to_string(),
                );
                None
            } else if let Some(rows) = &tagged.constant {
                matrix_from_rows(rows, n, n, "diffusion.constant", &mut issues).and_then(|q| {
                    DiffusionSchedule::constant(q)
                        .map_err(|e| issues.push(format!("diffusion.constant rejected: {e}")))
                        .ok()
                })
            } else if let Some(value) = tagged.scalar {
                DiffusionSchedule::scalar(value, n)
                    .map_err(|e| issues.push(format!("diffusion.scalar rejected: {e}")))
                    .ok()
            } else {
                let knots = tagged.knots.as_ref().unwrap();
                let mut parsed = Vec::new();
                for (i, knot) in knots.iter().enumerate() {
                    if !(0.0..=1.0).contains(&knot.lambda) {
                        issues.push(format!(
                            "diffusion.knots[{i}].lambda = {} outside [0, 1]",
                            knot.lambda
                        ));
                    }
                    if let Some(q) = matrix_from_rows(
                        &knot.q,
                        n,
                        n,
                        &format!("diffusion.knots[{i}].Q"),
                        &mut issues,
                    ) {
                        parsed.push((knot.lambda, q));
                    }
                }
                if parsed.len() == knots.len() {
                    DiffusionSchedule::piecewise_linear(parsed)
                        .map_err(|e| issues.push(format!("diffusion.knots rejected: {e}")))
                        .ok()
                } else {
                    None
                }
            }
        }
    };

    // integrator
    if config.integrator.steps == 0 {
        issues.push("integrator.steps must be at least 1".to_string());
    }
    let record_every = config
        .integrator
        .record_every
        .unwrap_or_else(|| config.integrator.steps.div_ceil(2).max(1));
    if record_every == 0 {
        issues.push("integrator.record_every must be at least 1".to_string());
    }
    let scheme = match config.integrator.scheme {
        SchemeConfig::EulerMaruyama => Scheme::EulerMaruyama,
        SchemeConfig::Rk4Deterministic => Scheme::Rk4Deterministic,
    };
    if let (Scheme::Rk4Deterministic, Some(s)) = (scheme, &schedule) {
        if !s.is_zero() {
            issues.push(
                "integrator.scheme rk4_deterministic requires diffusion = \"zero\"".to_string(),
            );
        }
    }

    // particles / pinned initial conditions
    let initial_particles = config.initial_particles.as_ref().map(|rows| {
        rows.iter()
            .enumerate()
            .filter_map(|(i, row)| {
                if row.len() != n {
                    issues.push(format!(
                        "initial_particles[{i}] has length {}, expected dimension {n}",
                        row.len()
                    ));
                    None
                } else {
                    Some(DVector::from_vec(row.clone()))
                }
            })
            .collect::<Vec<_>>()
    });
    if let Some(pinned) = &initial_particles {
        if pinned.is_empty() {
            issues.push("initial_particles must not be empty".to_string());
        } else if config.particles != pinned.len() {
            issues.push(format!(
                "particles = {} does not match initial_particles length {}",
                config.particles,
                pinned.len()
            ));
        }
        if config.mode == Mode::Sequential {
            issues.push(
                "initial_particles is not supported in sequential mode (the ensemble is drawn \
                 from the prior)"
                    .to_string(),
            );
        }
        if let Some(bad) = pinned
            .iter()
            .flat_map(|p| p.iter())
            .find(|v| !v.is_finite())
        {
            issues.push(format!(
                "initial_particles contains a non-finite value {bad}"
            ));
        }
    } else if config.particles == 0 {
        issues.push("particles must be at least 1".to_string());
    }

    // sequential block
    let sequential = if config.mode == Mode::Sequential {
        match &config.sequential {
            None => {
                issues.push("mode sequential requires a sequential block".to_string());
                None
            }
            Some(seq) => {
                if matches!(config.likelihood, LikelihoodConfig::Raw { .. }) {
                    issues.push(
                        "mode sequential requires an H/R/z likelihood (raw A_h has no measurement model)"
                            .to_string(),
                    );
                }
                let f = matrix_from_rows(&seq.f, n, n, "sequential.F", &mut issues);
                let w = matrix_from_rows(&seq.w, n, n, "sequential.W", &mut issues);
                let mut measurements = Vec::new();
                if let Some(mm) = &measurement_model {
                    let d = mm.measurement_dim();
                    for (i, z) in seq.measurements.iter().enumerate() {
                        if z.len() != d {
                            issues.push(format!(
                                "sequential.measurements[{i}] has length {}, expected {d}",
                                z.len()
                            ));
                        } else {
                            measurements.push(DVector::from_vec(z.clone()));
                        }
                    }
                }
                let dynamics = match (f, w) {
                    (Some(f), Some(w)) => match LinearDynamics::new(f, w) {
                        Ok(dynamics) => Some(dynamics),
                        Err(e) => {
                            issues.push(format!("sequential.W rejected: {e}"));
                            None
                        }
                    },
                    _ => None,
                };
                match (dynamics, &measurement_model) {
                    (Some(dynamics), Some(mm)) if measurements.len() == seq.measurements.len() => {
                        Some(SequentialPlan {
                            dynamics,
                            measurement: mm.clone(),
                            measurements,
                        })
                    }
                    _ => None,
                }
            }
        }
    } else {
        None
    };
    if config.mode != Mode::Sequential && config.sequential.is_some() {
        issues.push(format!(
            "sequential block given but mode is {}",
            config.mode.as_str()
        ));
    }

    let _ = measurement_z;
    if !issues.is_empty() {
        return Err(LoadError::Invalid(issues));
    }

    let homotopy = homotopy.expect("validated above");
    let init_moments = homotopy
        .prior_moments()
        .expect("prior factorization validated above");
    Ok(RunPlan {
        name: config.name,
        seed: config.seed,
        dimension: n,
        homotopy,
        init_moments,
        schedule: schedule.expect("validated above"),
        integrator: IntegratorConfig {
            steps: config.integrator.steps,
            scheme,
            seed: config.seed,
            record_every,
        },
        particles: config.particles,
        mode: config.mode,
        initial_particles,
        sequential,
        trace_path: config.output.as_ref().and_then(|o| o.trace.clone()),
        summary_path: config.output.as_ref().and_then(|o| o.summary.clone()),
    })
}
