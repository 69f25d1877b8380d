use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input `{what}`: {reason}")]
    InvalidInput { what: &'static str, reason: String },

    /// Relative velocity vanishes, so the σ-parametrization has no reference direction.
    #[error("degenerate collision pair: relative velocity is zero")]
    DegeneratePair,

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("no convergence: {0}")]
    Convergence(String),

    #[error("fit quality too low: {0}")]
    Quality(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(what: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used in `summary.json`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput { .. } => "invalid_input",
            Error::DegeneratePair => "degenerate_pair",
            Error::Config { .. } => "config",
            Error::Convergence(_) => "convergence",
            Error::Quality(_) => "quality",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}
