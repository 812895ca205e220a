use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the trajectory-editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed dataset: {0}")]
    MalformedDataset(String),

    #[error("inconsistent geometry: {0}")]
    InconsistentGeometry(String),

    #[error("decode failure: {path}: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },

    #[error("object not found: no grounding hit for {0:?}")]
    ObjectNotFound(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("width mismatch: {0}")]
    WidthMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("step index {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown backend {0:?}")]
    UnknownBackend(String),

    #[error("unknown provider suite {0:?}")]
    UnknownProvider(String),

    #[error("provider {provider} failed: {reason}")]
    Provider { provider: String, reason: String },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {reason}")]
    Json { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Attaches a frame index to an error bubbling out of per-frame work.
    pub fn at_frame(self, index: usize) -> Self {
        Error::Frame {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            reason: err.to_string(),
        }
    }
}
