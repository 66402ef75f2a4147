use std::path::PathBuf;

/// Errors raised across the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    /// Stable machine-readable identifier for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Stale(_) => "stale",
            Error::Generation(_) => "generation",
            Error::Transport(_) => "transport",
            Error::Config(_) => "config",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
