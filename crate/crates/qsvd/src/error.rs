//! Crate-wide error type.
//!
//! Every error carries a [`ErrorKind`] so the CLI can map failures onto its
//! stable exit-code contract (2 = format, 3 = usage, 4 = numerical).

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Format,
    Usage,
    Numerical,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Format => 2,
            ErrorKind::Usage => 3,
            ErrorKind::Numerical => 4,
            ErrorKind::Io => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Format => "format",
            ErrorKind::Usage => "usage",
            ErrorKind::Numerical => "numerical",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (left {left_rows}x{left_cols}, right {right_rows}x{right_cols})")]
    ShapeMismatch {
        context: String,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("SVD did not converge after {sweeps} sweeps on a {rows}x{cols} matrix")]
    SvdNonConvergence { rows: usize, cols: usize, sweeps: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("checksum mismatch for {path}: manifest {expected}, blob {actual}")]
    ChecksumMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("shape inconsistency in entry '{name}': declared length {declared}, shape implies {implied}")]
    ShapeInconsistency {
        name: String,
        declared: u64,
        implied: u64,
    },

    #[error("entry '{name}' is out of bounds: offset {offset} + length {length} exceeds blob size {blob_len}")]
    OutOfBounds {
        name: String,
        offset: u64,
        length: u64,
        blob_len: u64,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidArgument(_) | Error::Usage(_) => {
                ErrorKind::Usage
            }
            Error::SvdNonConvergence { .. } | Error::NonFinite(_) => ErrorKind::Numerical,
            Error::Format(_)
            | Error::MissingFile(_)
            | Error::ChecksumMismatch { .. }
            | Error::ShapeInconsistency { .. }
            | Error::OutOfBounds { .. } => ErrorKind::Format,
            Error::Io { .. } => ErrorKind::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
