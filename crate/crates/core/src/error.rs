use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SamoraError>;

#[derive(Debug, Error)]
pub enum SamoraError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error in tensor `{tensor}`: {reason}")]
    Checkpoint { tensor: String, reason: String },

    #[error("checkpoint manifest error at {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("evaluation protocol violation: {0}")]
    Protocol(String),

    #[error("training refused: {0}")]
    Refused(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl SamoraError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SamoraError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        SamoraError::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        SamoraError::Config(msg.into())
    }
}
