use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("speed constraint infeasible: zero speed variance with mean {0} > 0")]
    ConstraintInfeasible(f64),

    #[error("{level} not found: {id}")]
    NotFound { level: &'static str, id: String },

    #[error("non-finite log-likelihood for element {0}")]
    NonFiniteLikelihood(String),

    #[error("effect unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("config incompatible with monotonic deterioration (rejection rate {0:.4})")]
    IncompatibleConfig(f64),

    #[error("{path}:{line}: {msg}")]
    Schema { path: PathBuf, line: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cancelled")]
    Cancelled,

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), line, msg: msg.into() }
    }
}
