use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("position {position} exceeds max_positions {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("cache inconsistency: {0}")]
    CacheInconsistency(String),

    #[error("out of pages: {needed} needed, {free} free")]
    OutOfPages { needed: usize, free: usize },

    #[error("unknown sequence id {0}")]
    UnknownSequence(u64),

    #[error("sequence id {0} already allocated")]
    DuplicateSequence(u64),

    #[error("unknown adapter '{0}'")]
    UnknownAdapter(String),

    #[error("request queue is full (capacity {0})")]
    QueueFull(usize),

    #[error("resource exhausted: {0}")]
    ResourceExhausted(String),

    #[error("bad adapter container: {0}")]
    BadContainer(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(#[from] crate::server::wire::WireError),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code used on the wire and across the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Numeric(_) => "numeric-error",
            Error::PositionOverflow { .. } => "position-overflow",
            Error::CacheInconsistency(_) => "cache-inconsistency",
            Error::OutOfPages { .. } => "out-of-pages",
            Error::UnknownSequence(_) => "unknown-sequence",
            Error::DuplicateSequence(_) => "duplicate-sequence",
            Error::UnknownAdapter(_) => "unknown-adapter",
            Error::QueueFull(_) => "queue-full",
            Error::ResourceExhausted(_) => "resource-exhausted",
            Error::BadContainer(_) => "bad-container",
            Error::Config { .. } => "bad-config",
            Error::Protocol(_) => "bad-request",
            Error::File { .. } | Error::Io(_) => "io-error",
            Error::Schema { .. } => "schema-error",
            Error::Wav(_) => "bad-audio",
            Error::Json(_) => "bad-request",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
