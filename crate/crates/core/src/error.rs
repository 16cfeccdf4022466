use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },

    #[error("degenerate camera layout: {0}")]
    DegenerateLayout(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion { what: &'static str, found: u32, expected: u32 },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { term: String, iteration: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
