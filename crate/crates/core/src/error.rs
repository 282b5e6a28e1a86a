use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (shapes, index ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid or infeasible configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),
    /// A numerical routine could not produce a trustworthy result.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Failure inside the tensor backend.
    #[error("backend error: {0}")]
    Backend(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
