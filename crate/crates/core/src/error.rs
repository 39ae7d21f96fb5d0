use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("layers {first} and {second} do not chain: {detail}")]
    Chain {
        first: usize,
        second: usize,
        detail: String,
    },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("layer {0} has no cached activation; run a training-mode forward pass first")]
    MissingActivation(usize),

    #[error("no gradients populated; call backward before sgd_step")]
    MissingGrads,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("freeze index {index} out of range for a model with {layers} layers")]
    FreezeIndex { index: usize, layers: usize },

    #[error("{0}")]
    Toa(String),

    #[error("{0}")]
    Invalid(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Architecture(_) | Error::Chain { .. } | Error::Parse { .. }
        )
    }
}
