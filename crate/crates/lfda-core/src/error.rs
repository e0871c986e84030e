//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by data ingestion, model fitting, and prediction.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("fit error in stage `{stage}`: {message}")]
    Fit { stage: String, message: String },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("model file error: {0}")]
    ModelFile(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn fit(stage: &str, msg: impl Into<String>) -> Self {
        Error::Fit {
            stage: stage.to_string(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
