use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or building datasets and graphs.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: cannot parse `{token}` as a non-negative integer")]
    Parse {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("inconsistent data: {0}")]
    Consistency(String),
}

/// Errors raised by the differentiable kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Contract(String),
    #[error("{term} term: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: Box<ComputeError>,
    },
}

impl ComputeError {
    /// True when the root cause is a NaN or infinity.
    pub fn is_non_finite(&self) -> bool {
        match self {
            ComputeError::NonFinite { .. } => true,
            ComputeError::Term { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }
}

/// Top-level error for training, evaluation and artifact IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: ComputeError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than usage or IO.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Diverged { .. } => true,
            Error::Compute(e) => e.is_non_finite(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
