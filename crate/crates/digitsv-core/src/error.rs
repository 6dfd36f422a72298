//! Crate-wide error type.
//!
//! Numeric code reports failures instead of panicking: shape mismatches,
//! non-finite values escaping an operation, violated call contracts,
//! vocabulary misuse and infeasible alignments all surface as [`Error`].

use alloc::string::String;
use core::fmt;

/// Convenience alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    Dim(String),
    /// An operation produced NaN or +/-inf.
    NonFinite(&'static str),
    /// A call precondition was violated (empty input, double backward, ...).
    Contract(String),
    /// A token id fell outside the vocabulary slice it is allowed in.
    Vocab(String),
    /// The requested alignment or sampling plan cannot be satisfied.
    Infeasible(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::NonFinite(op) => write!(f, "non-finite value produced by {op}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Vocab(msg) => write!(f, "vocabulary error: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn vocab(msg: impl Into<String>) -> Self {
        Error::Vocab(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}
