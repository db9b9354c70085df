use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes or layer geometry.
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Inputs that violate an operation's contract (bad labels, lengths, names).
    #[error("validation error: {0}")]
    Validation(String),

    /// A non-finite value surfaced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed binary or text input (IDX files, checkpoints, config).
    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Command-line misuse; maps to exit status 2.
    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
