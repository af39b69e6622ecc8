use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index out of range in {op}: {index} >= {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value at iteration {iteration} (layer {layer})")]
    NonFinite { layer: String, iteration: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad format in {path}: expected {expected}, found {actual}")]
    Format {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("dataset unavailable: {0}")]
    MissingDataset(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Index { .. } => "index",
            Error::Domain { .. } => "domain",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::MissingDataset(_) => "missing_dataset",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
