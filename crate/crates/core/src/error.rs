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

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid embedding matrix: {0}")]
    InvalidEmbeddings(String),

    #[error("malformed embedding header: {0}")]
    MalformedHeader(String),

    #[error("embedding payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("index {index} out of range for {len} patches")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: ground truth is {gt:?}, prediction is {pred:?}")]
    ShapeMismatch {
        gt: (usize, usize),
        pred: (usize, usize),
    },

    #[error("patch ids present in both source and target: {0:?}")]
    DomainOverlap(Vec<String>),

    #[error("unknown domain `{0}` (expected one of Cyto, Histo, MultiInst)")]
    UnknownDomain(String),

    #[error("trainer invocation failed: {0}")]
    Trainer(String),

    #[error("missing prediction for `{0}`")]
    MissingPrediction(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
