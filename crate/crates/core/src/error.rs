use std::path::PathBuf;

use thiserror::Error;

/// Failure of an agent call after the retry budget was spent, or on a
/// non-transient response.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("agent transport failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
pub struct TransportError {
    pub status: Option<u16>,
    pub attempts: u32,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error("quality gate: {0}")]
    Quality(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } => 1,
            Error::Schema(_) => 2,
            Error::Transport(_) => 3,
            Error::Quality(_) => 4,
            Error::Internal(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
