use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("negative loss input: {0}")]
    NegativeLoss(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite activation in {0}")]
    NonFinite(String),

    #[error("codec did not converge: held-out reconstruction MAE {mae:.4} > {target:.4}")]
    NonConvergence { mae: f64, target: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing pair for {0}")]
    MissingPair(PathBuf),

    #[error("mask {path} is not binary: found value {value} (masks must contain only 0 and 255)")]
    NonBinaryMask { path: PathBuf, value: u8 },

    #[error("external backend timed out after {0:?} waiting for request {1}")]
    BackendTimeout(std::time::Duration, String),

    #[error("synthetic sample {id} rejected: out-of-mask drift {drift:.4} exceeds {limit}")]
    OutOfMaskDrift { id: String, drift: f64, limit: f64 },

    #[error("run failed: {0}")]
    Run(String),

    #[error("report: {0}")]
    Report(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("safetensors: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidRange(_)
                | Error::ShapeMismatch { .. }
                | Error::TimestepOutOfRange { .. }
                | Error::NegativeLoss(_)
                | Error::Config(_)
                | Error::Validation(_)
                | Error::EmptyDataset(_)
                | Error::MissingPair(_)
                | Error::NonBinaryMask { .. }
        )
    }
}
