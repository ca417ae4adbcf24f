use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid label {label} for {context}")]
    InvalidLabel { label: i64, context: &'static str },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("size guard exceeded: {required} entries requested, limit is {limit}")]
    SizeGuard { required: usize, limit: usize },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("class {0} has no samples")]
    EmptyClass(i64),

    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u16),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Coarse error class, used by the command-line front end for exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::SizeGuard { .. } => ErrorClass::ResourceGuard,
            Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    ResourceGuard,
    Numeric,
}
