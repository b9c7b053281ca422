use std::path::PathBuf;

/// Errors shared across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or shape violation, with a description of what was expected.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration or argument value.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN or Inf where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// File format violation (bad magic, truncated payload, version mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// Dataset / manifest level problem.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
