use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes, dimensions or configuration values that violate an operation's
    /// preconditions.
    InvalidInput(String),
    /// A forward or backward computation produced a non-finite value.
    NonFinite { op: &'static str, detail: String },
    /// A metric that is not defined for the given inputs (e.g. surface
    /// distance of an empty mask).
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::NonFinite { op, detail } => write!(f, "non-finite value in {op}: {detail}"),
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
