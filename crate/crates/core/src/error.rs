//! Workspace-wide error type.
//!
//! Variants map one-to-one onto the CLI exit codes: configuration errors
//! exit 2, data errors 3, numerical divergence 4, protocol violations 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or infeasible data: corpora, datasets, score files (exit code 3).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or failed numerical procedures (exit code 4).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Federated protocol contract violations (exit code 5).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            Error::Protocol(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
