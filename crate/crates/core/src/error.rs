use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty histogram")]
    EmptyHistogram,

    #[error("channel `{channel}` has no foreground pixels")]
    NoForeground { channel: String },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("cyclic hierarchy rules involving `{0}`")]
    CyclicHierarchy(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training aborted: {0}")]
    NonFinite(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
