use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: PathBuf, line: usize, reason: String },

    #[error("{path}:{line}: unknown label {value:?}")]
    UnknownLabel { path: PathBuf, line: usize, value: String },

    #[error("{path}:{line}: expected {expected} vector components, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("duplicate example id {0:?}")]
    DuplicateId(String),

    #[error("jaccard distance undefined for two empty token sets")]
    EmptyTokenSets,

    #[error("not enough qualifying examples for {side}: need {needed}, have {available}")]
    Shortfall {
        side: String,
        needed: usize,
        available: usize,
    },

    #[error("counter-bias pool is empty")]
    EmptyPool,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("example {index} has no unmasked tokens")]
    EmptySequence { index: usize },

    #[error("training diverged at step {step} (last finite loss {last_finite_loss:?} at step {last_finite_step:?})")]
    Diverged {
        step: usize,
        last_finite_step: Option<usize>,
        last_finite_loss: Option<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Broad failure classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Training,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorClass::Usage,
            Error::Diverged { .. } | Error::Numerical(_) => ErrorClass::Training,
            _ => ErrorClass::Data,
        }
    }
}
