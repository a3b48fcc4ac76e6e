//! Error type shared across the crate.

use std::fmt;

/// Errors produced by tensor ops, model construction, data handling and I/O.
#[derive(Debug)]
pub enum Error {
    /// Tensor or layer shapes do not line up. The message names both sides.
    ShapeMismatch(String),
    /// An argument violates an operation's precondition (non-odd kernel, zero
    /// stride, bad flag combination, ...).
    InvalidArgument(String),
    /// A NaN or infinity surfaced where finite values are required. Carries
    /// the label of the first offending tensor.
    NonFinite(String),
    /// Configuration file or field is invalid.
    Config(String),
    /// Malformed input data (CSV cell, ragged row, empty dataset, ...).
    Data(String),
    /// Checkpoint container is corrupt or does not match the model.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
