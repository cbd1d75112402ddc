use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("divergence at node {node} (state norm {norm:e})")]
    Divergence { node: usize, norm: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("replica {replica}: {source}")]
    Replica { replica: usize, source: Box<Error> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether this error, or the error it wraps, is a numerical divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Self::Divergence { .. } => true,
            Self::Replica { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
