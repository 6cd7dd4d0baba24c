use thiserror::Error;
use tomorib_nn::NnError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("lesion placement failed: {0}")]
    LesionPlacement(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("file format: {0}")]
    Format(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<CoreError>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// Wrap with a short description of what was being attempted.
    pub fn context(self, what: impl Into<String>) -> Self {
        CoreError::Context { context: what.into(), source: Box::new(self) }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &CoreError {
        match self {
            CoreError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
