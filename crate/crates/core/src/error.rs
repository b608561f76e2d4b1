use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty or degenerate mask: {0}")]
    EmptyMask(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("dataset ingestion failed: {0}")]
    Ingestion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config/checkpoint mismatch: config hash {config_hash}, checkpoint hash {checkpoint_hash}")]
    ConfigMismatch {
        config_hash: String,
        checkpoint_hash: String,
    },

    #[error("i/o error at {path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, data, arguments)
    /// rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Tensor(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
