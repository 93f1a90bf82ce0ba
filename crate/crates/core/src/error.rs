use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The CLI maps these onto exit categories: validation and config problems
/// are usage errors, data and cache problems are data errors, and numeric
/// blow-ups are numeric errors.
#[derive(Debug, thiserror::Error)]
pub enum GrassError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at line {line}, field `{field}`: {message}")]
    Data {
        line: usize,
        field: String,
        message: String,
    },

    #[error("cache invalid: {0}")]
    CacheInvalid(String),

    #[error("cache missing at {0}; run `grass preprocess` first")]
    CacheMissing(PathBuf),

    #[error("checkpoint invalid: {0}")]
    Checkpoint(String),

    #[error("numeric error in layer {layer}: {message}")]
    Numeric { layer: usize, message: String },

    #[error("numeric error in {context}: {message}")]
    NonFinite { context: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GrassError>;

impl GrassError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GrassError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> GrassError {
    GrassError::Validation(msg.into())
}
