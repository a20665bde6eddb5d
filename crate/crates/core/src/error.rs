use std::path::PathBuf;

use latseg_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("state error: {0}")]
    State(String),

    #[error("alignment shape error: feature map has H*W = {hw} cells but teacher produced L = {tokens} tokens")]
    AlignmentShape { hw: usize, tokens: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },

    #[error("listing error: {0}")]
    Listing(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Nn(#[from] NnError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Configuration problems are reported with a distinct exit status.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
