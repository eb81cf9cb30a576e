use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, duplicates).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss, gradient or oracle evaluation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Configuration or input-file validation failed.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config/validation, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::NonFinite(_) => 3,
            Error::Io { .. } => 4,
        }
    }
}
