use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by vertex {vertex} ({op})")]
    NonFinite { vertex: u32, op: &'static str },
    #[error("unknown vertex id {0}")]
    UnknownVertex(u32),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("vertex {vertex} is not a {what} candidate")]
    NotCandidate { vertex: u32, what: &'static str },
    #[error("forward trace does not belong to this graph")]
    TraceMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("loss error: {0}")]
    Loss(String),
    #[error("classifier has no detector")]
    NoDetector,
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("parameter out of range: {0}")]
    Range(String),
    #[error("search space exhausted")]
    SpaceExhausted,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
