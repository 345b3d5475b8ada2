use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite loss evaluation: {0}")]
    Evaluation(String),

    #[error("target probability {probability:e} is below the singular-loss floor")]
    SingularLoss { probability: f64 },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("generation budget exhausted after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("integration produced a non-finite state at step {step}")]
    Integration { step: usize },

    #[error("training diverged at epoch {epoch}; the last finite model is attached")]
    Divergence { epoch: usize, checkpoint: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn parse(position: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            position,
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
