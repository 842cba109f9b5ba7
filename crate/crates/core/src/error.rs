use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("scope error: no baseline for `{0}`")]
    Scope(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("sweep error: {0}")]
    Sweep(String),
}

impl Error {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the pipeline stage an error belongs to, used to tag CLI diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::Io { .. } | Error::Format(_) => "ingest",
            Error::Argument(_) => "argument",
            Error::Fit(_) => "lawfit",
            Error::Shape(_) | Error::Training(_) => "regressor",
            Error::Scope(_) => "predict",
            Error::Split(_) => "split",
            Error::Sweep(_) => "select",
        }
    }
}
