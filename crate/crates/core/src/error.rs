use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KmclError>;

#[derive(Debug, Error)]
pub enum KmclError {
    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("covariance of kernel `{which}` is not positive definite")]
    NotPositiveDefinite { which: &'static str },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },

    #[error("kernels do not share a covariance, required by {kind}")]
    CovarianceMismatch { kind: &'static str },

    #[error("quadrature grid too coarse: {points} points per axis (need at least {min})")]
    GridTooCoarse { points: usize, min: usize },

    #[error("index {index} out of range for {len} {what}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("non-finite {what} at `{name}`")]
    NonFinite { what: &'static str, name: String },

    #[error("training aborted at epoch {epoch}, batch {batch}: non-finite loss")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("verification failed: {0}")]
    Verification(String),
}

impl KmclError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        KmclError::InvalidValue {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KmclError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 validation, 2 verification, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            KmclError::Verification(_) => 2,
            KmclError::NonFinite { .. } | KmclError::NonFiniteLoss { .. } => 3,
            KmclError::Io { .. } => 3,
            _ => 1,
        }
    }
}
