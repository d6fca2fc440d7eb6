use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error("zero-norm {which} vector at index {index} under cosine distance")]
    ZeroNorm { which: &'static str, index: usize },
    #[error("batch statistics not initialized: {0} has never seen a training batch")]
    Uninitialized(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("unknown sample: {0}")]
    UnknownSample(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
