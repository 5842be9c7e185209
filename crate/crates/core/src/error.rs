use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("prompt is empty after dropping special tokens")]
    EmptyPrompt,
    #[error("unknown token `{0}`")]
    Vocab(String),
    #[error("scene has no objects")]
    EmptyScene,
    #[error("object signatures cancel out (norm {0:e})")]
    DegenerateScene(f64),

    #[error("index out of range: {0}")]
    Index(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("modifier pool error: {0}")]
    Pool(String),
    #[error("lexicon error: {0}")]
    Lexicon(String),
    #[error("remote rewrite failed after {attempts} attempts: {reason}")]
    Retryable { attempts: u32, reason: String },
    #[error("rewrite rejected: {0}")]
    RejectedRewrite(String),

    #[error("formatted sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("loss mask selects no positions")]
    Mask,

    #[error("diffusion step {t} outside 1..={max}")]
    Step { t: usize, max: usize },

    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
