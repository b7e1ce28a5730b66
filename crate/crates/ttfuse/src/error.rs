//! Crate-wide error type.
//!
//! Variants are grouped so the CLI can map them onto its exit-code contract:
//! usage/config problems, data problems (files, formats, shapes), and
//! numeric failures (non-finite values where finite ones are required).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: [usize; 4],
        rhs: [usize; 4],
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("parameter has no gradient; run backward before the optimizer step")]
    MissingGrad,

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("decode failed: {0}")]
    Decode(String),

    #[error("bad checkpoint magic (not a TTFZ1 file)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("checkpoint checksum mismatch")]
    BadChecksum,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad flags, bad config file, out-of-range arguments.
    Usage,
    /// Missing or malformed files, shape/dimension mismatches, dataset problems.
    Data,
    /// NaN/Inf where finite values are required.
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArg(_) | Error::Config { .. } => ErrorClass::Usage,
            Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
