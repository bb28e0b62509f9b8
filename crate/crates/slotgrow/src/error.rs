//! Crate-wide error type.
//!
//! Shape and contract violations inside the numeric core are programming
//! errors and panic with a message carrying the offending shapes. Everything
//! reachable from user input (files, configs, CLI) goes through [`Error`].

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Generation, model, or run configuration that cannot be satisfied.
    #[error("config error: {0}")]
    Config(String),

    /// File does not start with the expected magic bytes.
    #[error("bad magic in {}: expected {expected:?}", path.display())]
    BadMagic { path: PathBuf, expected: String },

    /// Magic matched but the format version is unsupported.
    #[error("unsupported version in {}: found {found:?}, supported {supported:?}", path.display())]
    VersionMismatch {
        path: PathBuf,
        found: String,
        supported: String,
    },

    /// File ended before the declared payload was read.
    #[error("truncated file {}: {detail}", path.display())]
    Truncated { path: PathBuf, detail: String },

    /// Training produced a non-finite loss; carries the diagnostic dump.
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFinite { iter: usize, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
