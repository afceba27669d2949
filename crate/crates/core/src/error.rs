use std::path::PathBuf;

use autoprosam_tape::TapeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("organ {organ} could not be placed disjointly after {attempts} attempts")]
    Placement { organ: usize, attempts: usize },

    #[error("import error for entry `{entry}`: {detail}")]
    Import { entry: String, detail: String },

    #[error("patch sampling error: {0}")]
    Sampling(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error in `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<TapeError> for Error {
    fn from(e: TapeError) -> Self {
        match e {
            TapeError::Shape(s) => Self::Shape(s),
        }
    }
}
