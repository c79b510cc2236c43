use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A vector or matrix had the wrong length for the operation.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A configuration value was rejected before any computation ran.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The implicit solver failed to reach the requested tolerance.
    #[error("implicit solve did not converge: residual {residual:.3e} after {iters} iterations (tol {tol:.3e})")]
    SolverDiverged {
        residual: f64,
        iters: usize,
        tol: f64,
    },

    /// A rollout aborted partway through; `step` is the index of the
    /// first step that failed.
    #[error("rollout failed at step {step}: {cause}")]
    RolloutAborted {
        step: usize,
        #[source]
        cause: Box<Error>,
    },

    /// A state left the domain on which the system is defined
    /// (e.g. a gravitational singularity).
    #[error("state outside system domain: {0}")]
    DomainViolation(String),

    /// A non-finite number appeared where a finite one is required.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// File contents did not match the expected format.
    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
