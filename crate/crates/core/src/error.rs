use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ColfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ColfError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ColfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ColfError::Io {
            path: path.into(),
            source,
        }
    }
}
