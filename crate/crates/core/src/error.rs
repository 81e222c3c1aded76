use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {input}: expected {expected}, got {got}")]
    Shape {
        input: String,
        expected: String,
        got: String,
    },

    #[error("expected {expected} time steps, got {got}")]
    TimeSteps { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid value for {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("no clean imagery: every acquisition exceeded the contamination limit")]
    NoCleanImagery,

    #[error("pixel ({row}, {col}) has no clean time step")]
    NoCleanStep { row: usize, col: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("labels must contain both classes")]
    SingleClass,

    #[error("could not reach cover target {target:.3} after {attempts} attempts")]
    InfeasibleCover { target: f64, attempts: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(input: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            input: input.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
