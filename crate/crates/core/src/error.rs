use thiserror::Error;

/// Errors produced across the crate.
///
/// The variants map onto the CLI exit codes: `Numerical` and `Diverged`
/// exit with 3, everything else that is not a usage error exits with 2.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Tensor or image shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Input data violates an invariant (non-finite values, bad polygon, ...).
    #[error("invalid data: {0}")]
    Data(String),
    /// A file could not be parsed.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
