use std::path::PathBuf;

/// Errors produced by the localization toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedCodec { path: PathBuf, reason: String },

    #[error("audio file {0} contains no samples")]
    EmptyAudio(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("input too small: {0}")]
    InputTooSmall(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("ground truth map is identically zero")]
    EmptyGroundTruth,

    #[error("training diverged at step {step}: total loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
