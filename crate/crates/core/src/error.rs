//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("{op} would allocate {elements} elements (limit {limit})")]
    SizeLimit {
        op: &'static str,
        elements: usize,
        limit: usize,
    },

    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("{op} did not converge after {iterations} iterations")]
    NoConvergence { op: &'static str, iterations: usize },

    #[error("trace was recorded at model version {trace} but model is at version {model}")]
    StaleTrace { trace: u64, model: u64 },

    #[error("non-finite objective at step {step} (example {example})")]
    Divergence { step: usize, example: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("provenance mismatch: expected {expected}, found {found}")]
    Provenance { expected: String, found: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("seed {seed}, stage {stage}: {source}")]
    Stage {
        seed: u64,
        stage: &'static str,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 2,
            Error::Io(_) | Error::Data(_) | Error::Provenance { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}
