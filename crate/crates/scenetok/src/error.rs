//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient anchors: {0}")]
    InsufficientAnchors(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u16, n_classes: usize },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint incompatible: {0}")]
    IncompatibleCheckpoint(String),
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
