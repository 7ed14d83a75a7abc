//! Crate-wide error type.

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Bad configuration, bad arguments, violated preconditions.
    Config,
    /// Shape mismatches, non-finite values, contract misuse at runtime.
    Numeric,
    /// Filesystem and serialization failures.
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A layer's backward was invoked without a matching cached forward,
    /// or a cache was consumed twice.
    #[error("stale layer state: {0}")]
    State(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) => Category::Config,
            Error::Shape(_) | Error::NonFinite(_) | Error::State(_) => Category::Numeric,
            Error::Io(_) => Category::Io,
            Error::Json(_) => Category::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
