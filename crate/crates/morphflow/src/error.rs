//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload size mismatch in {path}: header declares {expected} elements, payload holds {actual}")]
    PayloadSizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("unsupported element type in {path}: {datatype}")]
    UnsupportedElementType { path: PathBuf, datatype: String },

    #[error("non-finite values in {path}")]
    NonFiniteData { path: PathBuf },

    #[error("shape mismatch: {context} ({left:?} vs {right:?})")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("backward cache does not match the supplied parameters")]
    StaleCache,

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape_mismatch(context: &str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
