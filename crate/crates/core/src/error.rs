//! Error type shared by all solver layers.
//!
//! The variants map onto the process exit codes used by the command line
//! front end: invalid configuration (1), numerical failure (2), resource
//! budget refusal (3) and invariant violation (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument or configuration value, detected before any numerics run.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A solve failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The requested problem exceeds a configured resource budget.
    #[error("budget exceeded: {0}")]
    Budget(String),

    /// A structural invariant (mass, symmetry, positivity, ...) was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Exit code for the command line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Numerical(_) => 2,
            Error::Budget(_) => 3,
            Error::Invariant(_) => 4,
            Error::Io(_) | Error::Serde(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}

pub(crate) fn invariant(msg: impl Into<String>) -> Error {
    Error::Invariant(msg.into())
}
