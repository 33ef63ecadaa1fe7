use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CrflError>;

#[derive(Debug, Error)]
pub enum CrflError {
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("numerical divergence at round {round}: {message}")]
    Divergence { round: usize, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate Markov kernel: {0}")]
    DegenerateKernel(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CrflError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CrflError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrflError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 for numerical divergence, 2 for every
    /// configuration or input problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            CrflError::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
