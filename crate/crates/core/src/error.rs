use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind}: dimension mismatch: {detail}")]
    Dimension { kind: &'static str, detail: String },

    #[error("{kind}: domain error: {detail}")]
    Domain { kind: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("infeasible alignment: target needs at least {required} frames, got {available}")]
    InfeasibleAlignment { required: usize, available: usize },

    #[error("oracle instance too large: {0}")]
    OracleSize(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stage sequencing error: {0}")]
    Sequencing(String),

    #[error("kind mismatch: {0}")]
    KindMismatch(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            kind,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
