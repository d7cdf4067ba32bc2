use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("covariance for latent dimension {dim} is not positive definite")]
    NotPositiveDefinite { dim: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: objective is {value}")]
    Diverged { epoch: usize, value: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
