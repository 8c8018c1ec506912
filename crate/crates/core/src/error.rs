use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("gradient check invalid: {0}")]
    GradCheck(String),

    #[error("episode aborted: {0}")]
    EpisodeAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
