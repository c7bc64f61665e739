use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,

    #[error("all Gaussians pruned")]
    AllPruned,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: unexpected end of file at byte offset {offset}")]
    UnexpectedEof { context: &'static str, offset: usize },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("record {record} (byte offset {offset}): {reason}")]
    InvalidRecord {
        record: usize,
        offset: usize,
        reason: String,
    },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("softmax requires a label set (got {0} queries)")]
    LabelSetTooSmall(usize),

    #[error("degenerate feature map: {0}")]
    DegenerateFeatureMap(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("render state does not match: {0}")]
    StateMismatch(String),

    #[error("unknown label {label:?}; known labels: {known}")]
    UnknownLabel { label: String, known: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
