use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core crate.
///
/// Variants are grouped by the subsystem that raises them so callers (the CLI
/// in particular) can report the module and cause.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    Grid(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("darcy coefficient must be positive, found {value} at node ({i}, {j})")]
    NonElliptic { value: f64, i: usize, j: usize },

    #[error("zero reference norm in {0}")]
    ZeroReference(&'static str),

    #[error("datagen: {0}")]
    Datagen(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("time {0} outside [0, pi/2]")]
    TimeRange(f64),

    #[error("consistency: {0}")]
    Consistency(String),

    #[error("network: {0}")]
    Network(String),

    #[error("training: {0}")]
    Training(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short name of the subsystem that produced the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Grid(_) | Error::NonFinite { .. } | Error::NonElliptic { .. } => "grid_pde",
            Error::ZeroReference(_) => "grid_pde",
            Error::Datagen(_) | Error::NoConvergence { .. } | Error::Sample { .. } => "datagen",
            Error::TimeRange(_) | Error::Consistency(_) => "consistency",
            Error::Network(_) => "networks",
            Error::Training(_) => "training",
            Error::Inference(_) => "inference",
            Error::Eval(_) => "eval",
            Error::Config(_) => "config",
            Error::Format(_) | Error::Io { .. } => "io",
        }
    }
}
