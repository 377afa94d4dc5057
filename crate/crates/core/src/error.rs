use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor archive: {0}")]
    MalformedArchive(String),

    #[error("shape inconsistency in tensor `{tensor}`: {detail}")]
    Shape { tensor: String, detail: String },

    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },

    #[error("token id {id} out of range (vocabulary size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid node: {0}")]
    InvalidNode(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("needle `{0}` not found in prompt")]
    NeedleAbsent(String),

    #[error("needle `{0}` occurs more than once in the search window")]
    NeedleAmbiguous(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("task spec: {0}")]
    Task(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("regression diverged at layer {layer}, step {step}")]
    Diverged { layer: usize, step: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn shape(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }
}
