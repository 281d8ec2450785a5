//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a documented precondition (degenerate box,
    /// non-finite offsets, bad shapes, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Registration backend failure for the volume at `time_index`.
    #[error("registration failed at time index {time_index}: {message}")]
    Registration { time_index: usize, message: String },

    /// The aortic reference time-point could not be determined.
    #[error("reference time-point detection failed: {0}")]
    ReferenceDetection(String),

    /// Breast segmentation produced no foreground.
    #[error("segmentation failed: {0}")]
    Segmentation(String),

    /// Bad or inconsistent configuration. The message names the key path.
    #[error("configuration error: {0}")]
    Config(String),

    /// Internal shape mismatch in the network graph.
    #[error("architecture error: {0}")]
    Architecture(String),

    /// Phantom generation failure (e.g. lesion placement retries exhausted).
    #[error("phantom generation failed: {0}")]
    Generation(String),

    /// Evaluation input problems: unknown breast id, zero normal breasts, ...
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training aborted (non-finite loss, missing tensors, ...).
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: config errors exit 2, missing files 3,
    /// everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 1,
        }
    }
}
