use thiserror::Error;

use crate::gp::GpModel;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The hyperparameter optimizer diverged. `best` is the best iterate seen
    /// before the failure.
    #[error("hyperparameter fit failed: {message} (best log-likelihood {log_likelihood})")]
    FitFailure {
        message: String,
        best: Box<GpModel>,
        log_likelihood: f64,
    },

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::FitFailure { .. } | Error::Optimization(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
