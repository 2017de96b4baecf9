use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dataset loading, validation and training.
#[derive(Debug, Error)]
pub enum EalignError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, EalignError>;

impl EalignError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EalignError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        EalignError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
