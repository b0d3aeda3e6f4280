use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("caption of {tokens} tokens exceeds the {limit}-token limit")]
    CaptionTooLong { tokens: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("metric undefined: {0}")]
    Domain(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (lr {lr}, batch ids {batch:?}): loss is {loss}")]
    Diverged { step: usize, lr: f32, loss: f32, batch: Vec<String> },

    #[error("output directory {0} already exists (use force to overwrite)")]
    Exists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse { context: context.into(), message: message.to_string() }
    }
}
