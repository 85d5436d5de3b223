use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A kernel produced (or was handed) a NaN or infinity.
    #[error("numeric error in {kernel}: {detail}")]
    Numeric { kernel: String, detail: String },

    /// A caller broke an API contract (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or truncated on-disk data.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
