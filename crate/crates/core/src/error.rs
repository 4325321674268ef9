use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SwepError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SwepError {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid example {id}: {message}")]
    Validation { id: String, message: String },

    #[error("cannot align answer for example {id}: {message}")]
    Alignment { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("span ({start}, {end}) falls on a padded or invalid position")]
    InvalidSpan { start: usize, end: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl SwepError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SwepError::Io {
            path: path.into(),
            source,
        }
    }
}
