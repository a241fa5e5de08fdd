use alloc::string::String;
use core::fmt;

/// Failure modes shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension(String),
    /// A NaN or infinite value reached an op that rejects it.
    Numeric(String),
    /// A precondition of an operation was violated by the caller.
    Contract(String),
    /// A configuration value is invalid.
    Config(String),
    /// An id or index is out of range.
    Index(String),
    /// Batch-hard mining could not find a positive or negative.
    Mining(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Mining(m) => write!(f, "mining error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
