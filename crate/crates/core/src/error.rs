use std::path::PathBuf;

use thiserror::Error;

/// Error kinds surfaced by the pipeline. Each maps onto one of the failure
/// classes the CLI reports (validation vs. runtime).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("sampler diverged at step {step}: {msg}")]
    Sampler { step: usize, msg: String },
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad inputs rather than failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Contract(_) | Error::Data(_) | Error::Format { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
