use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was given arguments outside its contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or a key is unknown.
    #[error("invalid config: {0}")]
    Config(String),

    /// A file did not match its expected binary or textual format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training diverged (non-finite loss or gradients).
    #[error("numerical divergence: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
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

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
