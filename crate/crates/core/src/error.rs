use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum N2kError {
    /// Inconsistent shapes, invalid hyperparameters, malformed specs.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, N2kError>;

impl N2kError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        N2kError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        N2kError::Io {
            path: path.into(),
            source,
        }
    }
}
