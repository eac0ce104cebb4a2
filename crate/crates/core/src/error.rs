use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the estimation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("gradient tape is stale: the network was modified after the forward pass")]
    StaleTape,

    #[error("non-finite gradient entry at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("normalizing flow needs at least 2 dimensions, got {dim}")]
    FlowUnsupported { dim: usize },

    #[error("prior variant `{0}` has no sampler")]
    UnsupportedSampling(&'static str),

    #[error("operation unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse { path: path.into(), message: message.to_string() }
    }

    /// True for failures that stem from numerics rather than from the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteGradient { .. } | Error::Numerical(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Parse { .. })
    }
}
