use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or length mismatch. The message names the offending axes.
    Dimension(String),
    /// Argument outside the mathematical domain of an operation.
    Domain(String),
    /// Index outside `[0, bound)`.
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Caller broke an operation's documented precondition.
    Contract(String),
    /// Operation not available for the given parameter mode.
    Mode(String),
    /// Invalid configuration.
    Config(String),
    /// A non-finite value appeared where finite values are required.
    NonFinite { context: String, index: usize },
    /// Labels and signal timeline do not line up.
    Alignment(String),
    /// A metric is undefined for the given input.
    Undefined(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Index { what, index, bound } => {
                write!(f, "index error: {what} {index} out of range [0, {bound})")
            }
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Mode(m) => write!(f, "mode error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::NonFinite { context, index } => {
                write!(f, "non-finite value in {context} at index {index}")
            }
            Error::Alignment(m) => write!(f, "alignment error: {m}"),
            Error::Undefined(m) => write!(f, "undefined: {m}"),
        }
    }
}

impl core::error::Error for Error {}

#[macro_export]
#[doc(hidden)]
macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(::alloc::format!($($arg)*))
    };
}
