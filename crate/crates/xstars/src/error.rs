use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar hyperparameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Tensor or array shapes disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numerical guard fired (zero-norm embedding, NaN loss, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was called with arguments that can never be valid (empty view lists, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Run configuration is inconsistent with the data or checkpoint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A documented invariant failed to hold on an internal value.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("failed to read chip for footprint `{footprint_id}` ({path}): {message}")]
    Chip {
        footprint_id: String,
        path: PathBuf,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
