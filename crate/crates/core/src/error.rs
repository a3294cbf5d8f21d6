use std::path::PathBuf;

use sparsemo_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: String, supported: u32 },
    #[error("invalid fps: {0}")]
    InvalidFps(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("insufficient context: {0}")]
    InsufficientContext(String),
    #[error("insufficient frames: {0}")]
    InsufficientFrames(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("evaluation prior is the training prior (hash {0})")]
    SamePrior(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::InvalidRotation(_) => "InvalidRotation",
            Error::InvalidSkeleton(_) => "InvalidSkeleton",
            Error::Parse { .. } => "ParseError",
            Error::Version { .. } => "VersionError",
            Error::InvalidFps(_) => "InvalidFps",
            Error::Config(_) => "ConfigError",
            Error::Data(_) => "DataError",
            Error::Shape(_) => "ShapeError",
            Error::InsufficientContext(_) => "InsufficientContext",
            Error::InsufficientFrames(_) => "InsufficientFrames",
            Error::InsufficientSamples(_) => "InsufficientSamples",
            Error::MissingCheckpoint(_) => "MissingCheckpoint",
            Error::SamePrior(_) => "SamePriorError",
            Error::NonFinite(_) => "NumericalError",
            Error::Nn(NnError::Shape { .. }) => "ShapeError",
            Error::Nn(NnError::MissingGrad(_)) => "MissingGrad",
            Error::Nn(NnError::UnknownParam(_)) => "UnknownParam",
            Error::Nn(_) => "CheckpointError",
            Error::Io { .. } => "IoError",
        }
    }
}
