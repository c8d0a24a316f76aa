use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    /// A topology failed validation. `layer` is the offending layer index.
    #[error("validation error{}: {msg}", fmt_layer(*.layer))]
    Validation { layer: Option<usize>, msg: String },

    #[error("shape error at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("group width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),

    #[error("invalid vector configuration: {0}")]
    InvalidConfig(String),

    #[error("configuration does not fit the device: {0}")]
    Infeasible(String),

    #[error("no feasible design point")]
    NoFeasiblePoint,

    #[error("unsupported layer for device execution at layer {layer}: {msg}")]
    Unsupported { layer: usize, msg: String },

    #[error("missing weights for layer {0}")]
    MissingWeights(String),

    #[error("batch size mismatch: expected {expected}, got {got}")]
    BatchSize { expected: usize, got: usize },

    #[error("bad tensor file: {0}")]
    Format(String),
}

fn fmt_layer(layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!(" at layer {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn validation(layer: usize, msg: impl Into<String>) -> Self {
        Error::Validation {
            layer: Some(layer),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
