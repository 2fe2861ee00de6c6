//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    DimMismatch(String),
    /// A value violates an encoding precondition (e.g. not exactly ±1).
    Encoding(String),
    /// An operation contract was violated (bad mode, non-scalar loss, ...).
    Contract(String),
    /// Malformed or truncated checkpoint / serialized payload.
    Checkpoint(String),
    /// Dataset-level problem (empty query set, missing positives, ...).
    Data(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch(m) => write!(f, "dimension mismatch: {m}"),
            Error::Encoding(m) => write!(f, "encoding error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for Error {}
