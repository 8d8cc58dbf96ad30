//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("edge references unknown node {node} at {path}:{line}")]
    UnknownNode {
        path: String,
        line: usize,
        node: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("response parse error: {0}")]
    ResponseParse(String),

    #[error("node {node} is not train-tagged; only train nodes may be exposed to the LLM")]
    ExposureViolation { node: usize },

    #[error("annotation failed for node {node}: {msg}")]
    AnnotationFailed { node: usize, msg: String },

    #[error("cache miss for request {hash} and client is cache-only")]
    CacheMiss { hash: String },

    #[error("LLM client error: {0}")]
    Client(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("empty training set")]
    EmptyTrainSet,

    #[error("{stage} stage failed: {msg}")]
    Stage { stage: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
