use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("duplicate graph input `{0}`")]
    DuplicateInput(String),

    #[error("output node {node} is not scalar (shape {shape:?})")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite function value at coordinate {coordinate} (x {sign} h)")]
    NonFiniteProbe { coordinate: usize, sign: char },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wav error at byte {offset}: {message}")]
    Wav { offset: u64, message: String },

    #[error("manifest line {line}: {message}")]
    Manifest { line: u64, message: String },

    #[error("unknown class for machine `{machine_type}` id {machine_id}")]
    UnknownClass {
        machine_type: String,
        machine_id: u32,
    },

    #[error("non-finite gradient for tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
