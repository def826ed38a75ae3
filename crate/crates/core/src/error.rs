use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("parse error at byte {position}: {kind}")]
    Parse { position: u64, kind: ParseErrorKind },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The distinct ways a checkpoint container can be malformed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("file shorter than the 8-byte header length prefix")]
    MissingLengthPrefix,
    #[error("header length {declared} exceeds available {available} bytes")]
    HeaderTooLong { declared: u64, available: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("tensor {key:?}: offset overflow")]
    OffsetOverflow { key: String },
    #[error("tensor {key:?}: data_offsets [{begin}, {end}) exceed buffer of {len} bytes")]
    Truncated { key: String, begin: u64, end: u64, len: u64 },
    #[error("tensor {key:?}: {actual} payload bytes, shape and dtype require {expected}")]
    SizeMismatch { key: String, expected: u64, actual: u64 },
    #[error("tensors {first:?} and {second:?} have overlapping data_offsets")]
    Overlap { first: String, second: String },
    #[error("invalid tensor {key:?}: {reason}")]
    InvalidTensor { key: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(position: u64, kind: ParseErrorKind) -> Self {
        Error::Parse { position, kind }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
