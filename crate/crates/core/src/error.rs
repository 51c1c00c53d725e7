use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("point ({x:?}, t = {t}) lies outside the domain")]
    OutOfDomain { x: [f64; 3], t: f64 },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("pressure solve did not converge after {iterations} iterations (max residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("CFL number {cfl:.3} exceeds the limit {limit}")]
    StepSize { cfl: f64, limit: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("model parameters contain a non-finite value at index {index}")]
    PoisonedModel { index: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("non-finite input: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite residual at {} collocation point(s)", points.len())]
    NonFiniteResidual { points: Vec<usize> },

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
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

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid user configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
