use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing component: {0}")]
    MissingComponent(String),

    /// A training loop produced a non-finite loss. `trace` holds the loss of
    /// every completed epoch (or step) before the failure.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String, trace: Vec<f64> },

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file {}: {detail}", path.display())]
    Parse { path: PathBuf, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), detail: detail.into() }
    }

    /// Wraps `self` with the name of the pipeline phase it escaped from.
    pub fn in_phase(self, phase: &str) -> Self {
        Error::Phase { phase: phase.to_string(), source: Box::new(self) }
    }

    /// True for failures caused by numbers (non-finite values, divergence).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) | Error::Divergence { .. } => true,
            Error::Phase { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    /// True for filesystem and file-format failures.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => true,
            Error::Phase { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
