use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode sample '{id}': {reason}")]
    Decode { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class '{0}' has zero samples")]
    EmptyClass(&'static str),

    #[error("malformed index: {0}")]
    Index(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: expected {expected}, received {received}")]
    Shape { expected: String, received: String },

    #[error("wiring error: {0}")]
    Wiring(String),

    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),

    #[error("label {0} is not binary (expected 0 or 1)")]
    InvalidLabel(u8),

    #[error("empty input")]
    EmptyInput,

    #[error("AUC undefined for single-class labels")]
    SingleClass,

    #[error("pretrained weights for '{backbone}' not found at {path}; {guidance}")]
    PretrainedUnavailable {
        backbone: String,
        path: PathBuf,
        guidance: String,
    },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
