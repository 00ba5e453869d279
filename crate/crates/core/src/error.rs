use thiserror::Error;

use crate::geometry::ExtrinsicEstimate;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: need at least {required} matches, got {got}")]
    InsufficientData { required: usize, got: usize },

    /// The normal equations could not be factorized even after damping.
    /// Carries the best estimate reached before the failure, when there is one.
    #[error("degenerate geometry: {reason}")]
    DegenerateGeometry {
        reason: String,
        best: Option<Box<ExtrinsicEstimate>>,
    },

    #[error("retraction step too large: translation collapsed to zero")]
    StepTooLarge,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn degenerate(reason: impl Into<String>) -> Self {
        Error::DegenerateGeometry {
            reason: reason.into(),
            best: None,
        }
    }
}
