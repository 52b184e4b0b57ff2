//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no valid interactions in input")]
    NoValidInteractions,

    #[error("invalid {kind} id {id}: index has {len} entries")]
    InvalidId {
        kind: &'static str,
        id: usize,
        len: usize,
    },

    #[error("non-finite value in parameter block `{block}`")]
    NonFinite { block: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("objective diverged at iteration {iteration} (value {value})")]
    Diverged { iteration: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("all {count} grid cells failed; first failure: {first}")]
    AllCellsFailed { count: usize, first: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an I/O error with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
