use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate 6D rotation (column norm below tolerance or parallel columns)")]
    DegenerateRotation,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("length {len} is not divisible by {ratio}; pad by repeating the first frame")]
    PaddingRequired { len: usize, ratio: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token {index} out of range for codebook of size {size}")]
    Token { index: usize, size: usize },
    #[error("non-finite value in {0}")]
    Numerical(String),
    #[error("audio/motion alignment: {0}")]
    Alignment(String),
    #[error("every logit is masked for the next position")]
    Mask,
    #[error("label error: {0}")]
    Label(String),
    #[error("embedding has zero norm")]
    DegenerateEmbedding,
    #[error("session has not been warmed up")]
    NotInitialized,
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(term: impl Into<String>) -> Self {
        Error::Numerical(term.into())
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
