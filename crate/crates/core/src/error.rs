use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decoding stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown topology `{name}` (valid: {valid})")]
    UnknownTopology { name: String, valid: String },

    #[error("unstable filter: pole magnitude {0}")]
    UnstableFilter(f64),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("statistic undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MissingGradient(_) => "missing_gradient",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::UnknownTopology { .. } => "unknown_topology",
            Error::UnstableFilter(_) => "unstable_filter",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Undefined(_) => "undefined",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
