use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call zero_grad before running it again")]
    BackwardTwice,
    #[error("index {index} out of range for length {len} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("invalid label space: {0}")]
    LabelSpace(String),
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("invalid instruction template: {0}")]
    Template(String),
    #[error("no instruction available for dataset `{0}`")]
    EmptyPool(String),
    #[error("invalid threshold {0}; expected 0 < tau < 1")]
    Threshold(f64),
    #[error("misaligned evaluation: {preds} predictions vs {golds} gold instances")]
    Misaligned { preds: usize, golds: usize },
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
