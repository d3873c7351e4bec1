use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape constraint violated.
    Shape(String),
    /// Bad argument to an operation or constructor.
    Invalid(String),
    /// Model or run configuration rejected.
    Config(String),
    /// Autodiff tape misuse (non-scalar root, root not on tape).
    Tape(String),
    /// Dataset loading or decoding failure.
    Data(String),
    /// Checkpoint or file format violation.
    Format(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Tape(msg) => write!(f, "tape error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
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
