//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, flow evaluation, and integration.
#[derive(Debug, Error)]
pub enum FlowError {
    /// A matrix that must be symmetric positive definite is not.
    #[error("{what} is not positive definite: min eigenvalue {min_eig:.6e} below {tol:.6e} (max eigenvalue {max_eig:.6e})")]
    NotPositiveDefinite {
        what: String,
        min_eig: f64,
        max_eig: f64,
        tol: f64,
    },

    /// A matrix that must be positive semi-definite has an eigenvalue below tolerance.
    #[error(
        "{what} is not positive semi-definite: eigenvalue {min_eig:.6e} below tolerance {tol:.6e}"
    )]
    NotPositiveSemiDefinite {
        what: String,
        min_eig: f64,
        tol: f64,
    },

    /// The homotopy Hessian is numerically singular at the given lambda.
    #[error("homotopy Hessian singular at lambda={lambda}: min eigenvalue {min_eig:.6e} below {tol:.6e} of max {max_eig:.6e}")]
    SingularHomotopy {
        lambda: f64,
        min_eig: f64,
        max_eig: f64,
        tol: f64,
    },

    /// A particle left the finite domain during integration.
    #[error("particle {particle_id} diverged (non-finite state) at lambda={lambda}")]
    Divergence { particle_id: u64, lambda: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("need at least {required} samples, found {found}")]
    InsufficientSamples { required: usize, found: usize },

    /// The combined precision of prior and likelihood is not positive definite.
    #[error("posterior precision not positive definite (improper posterior): min eigenvalue {min_eig:.6e}")]
    ImproperPosterior { min_eig: f64 },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    /// Wraps an error with the sequential-filter step at which it occurred.
    #[error("at filter step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<FlowError>,
    },
}

impl FlowError {
    /// Attach a sequential-filter step index to an inner error.
    pub fn at_step(self, step: usize) -> Self {
        FlowError::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;
