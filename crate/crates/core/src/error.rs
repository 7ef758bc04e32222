use thiserror::Error;

pub type Result<T> = std::result::Result<T, QoeError>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum QoeError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requested before any forward pass was recorded")]
    NoForward,

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Malformed tabular input; `line` is 1-based and counts the header.
    #[error("{message} at line {line}")]
    Csv { line: u64, message: String },

    #[error("invalid trace: {0}")]
    Trace(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("no labeled data: {0}")]
    NoLabels(String),

    #[error("model file: {0}")]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model-file decoding failures, each reported distinctly.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes (not a model file)")]
    BadMagic,

    #[error("version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated stream")]
    Truncated,

    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed content: {0}")]
    Malformed(String),
}

impl QoeError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        QoeError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        QoeError::InvalidArgument(msg.into())
    }
}
