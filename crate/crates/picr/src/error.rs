use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("corrupt bitstream: {0}")]
    CorruptStream(String),

    #[error("truncated bitstream (expected {expected} more bytes)")]
    TruncatedStream { expected: usize },

    #[error("bad magic bytes (not a picr bitstream)")]
    BadMagic,

    #[error("unsupported bitstream version {0}")]
    BadVersion(u8),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("image error: {0}")]
    Image(String),

    #[error("stage {0} has no prompt tokens")]
    NoPrompts(usize),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}
