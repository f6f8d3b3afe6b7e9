use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// σ ≥ Φ: the sensor can never resolve the requested minimum quantity.
    #[error("infeasible threshold: noise sigma {sigma} is not below minimum quantity phi {phi}")]
    InfeasibleThreshold { sigma: f64, phi: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// Integration hit a non-finite state; the log up to that point is kept.
    #[error("integration aborted at t = {}: {}", .0.time, .0.message)]
    Aborted(Box<crate::trajectory::AbortedRun>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
