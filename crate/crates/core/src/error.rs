use alloc::string::String;
use core::fmt;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform.
    Shape(String),
    /// A NaN or infinity appeared where a finite value is required.
    Numeric(String),
    /// A precondition on an argument was violated.
    Argument(String),
    /// Training diverged (total loss became non-finite) during `epoch` (1-based).
    Divergence { epoch: usize },
    /// Accuracy lower-bound search could not reach its target.
    Search(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Divergence { epoch } => {
                write!(
                    f,
                    "training diverged: loss became non-finite in epoch {epoch}"
                )
            }
            Error::Search(msg) => write!(f, "search error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
