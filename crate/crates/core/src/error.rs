use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("geometry error in {op}: {detail}")]
    Geometry { op: String, detail: String },

    #[error("numeric error: non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("label error: {0}")]
    Label(String),

    #[error("state error: {0}")]
    State(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("at time step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("build error at layer {layer}: {detail}")]
    Build { layer: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checksum mismatch in {path}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("unsupported version in {path}: expected {expected}, found {found}")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("config error at key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("training aborted: non-finite loss at batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn geometry(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Geometry {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
