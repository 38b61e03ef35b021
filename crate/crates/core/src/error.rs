use std::io;

use thiserror::Error;

use crate::container::CompatibilityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(CompatibilityReport),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("scheme detection failed: {0}")]
    Detection(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("merge error: {0}")]
    Merge(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn merge(msg: impl Into<String>) -> Self {
        Error::Merge(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub(crate) fn analysis(msg: impl Into<String>) -> Self {
        Error::Analysis(msg.into())
    }
}
