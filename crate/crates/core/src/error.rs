use alloc::string::String;
use core::fmt;

/// Errors raised by tensor operations, energies and the network.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand extents do not fit the operation.
    Shape(String),
    /// A softmax row (or attention window) has no unmasked entry.
    DegenerateRow { row: usize },
    /// A value lies outside the domain of the function (e.g. `log` of a nonpositive number).
    Domain(String),
    /// A documented precondition was violated.
    Contract(String),
    /// A non-finite value appeared in the named stage.
    Numeric { stage: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::DegenerateRow { row } => write!(f, "degenerate row {row}: every entry is masked"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric { stage } => write!(f, "non-finite value produced in stage `{stage}`"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use shape_err;
