use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the KV cache store.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("cache key (t={timestep}, block={block}) written twice")]
    DuplicateKey { timestep: u32, block: u32 },
    #[error("cache is sealed; writes are rejected")]
    Sealed,
    #[error("cache miss for (t={timestep}, block={block})")]
    Miss { timestep: u32, block: u32 },
    #[error("cache read before the joint pass sealed it")]
    NotSealed,
    #[error("cache integrity failure: {0}")]
    Integrity(String),
    #[error("unsupported cache layout version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format { what, message: message.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Image { .. } => ErrorClass::Io,
            Error::Format { .. } | Error::Shape(_) | Error::InvalidInput(_) | Error::Config(_) => {
                ErrorClass::Validation
            }
            Error::Cache(CacheError::Integrity(_)) | Error::Cache(CacheError::Version { .. }) => {
                ErrorClass::Validation
            }
            Error::Cache(_) | Error::Invariant(_) => ErrorClass::Internal,
        }
    }
}
