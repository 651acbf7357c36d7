//! Error taxonomy shared by every pipeline stage.
//!
//! Each variant carries a stable machine-readable code (see [`Error::code`])
//! so the CLI can emit structured error records without string matching.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// One message per violated constraint; validation never stops at the
    /// first problem.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A metric whose preconditions fail (single-class labels, empty mask).
    /// Reported as absent rather than coerced to a number.
    #[error("metric undefined: {0}")]
    Metric(String),

    /// Training produced a non-finite value; names the loss component so the
    /// offending term can be isolated.
    #[error("non-finite {component} at step {step} (value {value})")]
    NonFinite { component: String, step: u64, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    /// Module-qualified error code for machine-readable records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config/invalid",
            Error::Data(_) => "data/load",
            Error::Checkpoint(_) => "checkpoint/corrupt",
            Error::Metric(_) => "metric/undefined",
            Error::NonFinite { .. } => "train/non-finite",
            Error::Io { .. } => "io/failure",
            Error::Image { .. } => "data/image",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
