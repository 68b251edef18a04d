use std::path::PathBuf;

use crate::engine::Phase;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("architecture schema: {0}")]
    Schema(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("operation requires phase {expected} but state is in phase {actual}")]
    WrongPhase { expected: Phase, actual: Phase },

    #[error("phase {phase} failed at epoch {epoch}: {source}")]
    PhaseFailed {
        phase: Phase,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("output directory {0} is locked by another invocation")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable token used in machine-parseable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::WrongPhase { .. } => "wrong_phase",
            Error::PhaseFailed { .. } => "phase_failed",
            Error::Locked(_) => "locked",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
