use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("POS provider failure: {0}")]
    Provider(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence too long: sentence {sentence_id} needs {needed} positions, max_length is {max_length}")]
    SequenceTooLong {
        sentence_id: String,
        needed: usize,
        max_length: usize,
    },

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}{}", saved.as_ref().map(|p| format!("; last finite state saved to {}", p.display())).unwrap_or_default())]
    Divergence {
        epoch: usize,
        step: usize,
        saved: Option<PathBuf>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
