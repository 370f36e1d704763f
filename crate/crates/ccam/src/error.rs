//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
///
/// File-format problems get their own variants so callers (and tests) can
/// tell a bad magic apart from a truncated payload or an unknown dtype.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are inconsistent for the requested operation.
    Shape(String),
    /// A value-level precondition was violated (bad threshold, label out of
    /// range, malformed combination spec, ...).
    InvalidArgument(String),
    /// A file did not start with the expected magic bytes.
    BadMagic { expected: &'static str, found: Vec<u8> },
    /// A file ended before its declared payload was complete.
    Truncated(String),
    /// A tensor file declared a dtype code this build does not understand.
    UnknownDtype(u32),
    /// A file declared a format version this build does not understand.
    UnknownVersion(u32),
    /// A checkpoint contained the same entry name twice.
    DuplicateName(String),
    /// A checkpoint was missing a parameter the model architecture demands.
    MissingParameter(String),
    /// A checkpoint carried a parameter the model architecture does not use.
    UnexpectedParameter(String),
    /// A text file (manifest, report) failed to parse; `line` is 1-based.
    Parse { line: usize, message: String },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            Error::Truncated(what) => write!(f, "truncated file: {what}"),
            Error::UnknownDtype(code) => write!(f, "unknown dtype code {code}"),
            Error::UnknownVersion(v) => write!(f, "unknown format version {v}"),
            Error::DuplicateName(name) => write!(f, "duplicate entry name {name:?}"),
            Error::MissingParameter(name) => write!(f, "missing parameter {name:?}"),
            Error::UnexpectedParameter(name) => write!(f, "unexpected parameter {name:?}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
