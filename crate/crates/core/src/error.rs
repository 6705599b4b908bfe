use thiserror::Error;

use crate::grammar::TaskCategory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("unknown token surface {0:?}")]
    UnknownSurface(String),

    #[error("{category} has only {available} distinct specs but {requested} were requested")]
    SpecSpaceExhausted {
        category: TaskCategory,
        requested: usize,
        available: usize,
    },

    #[error("token sequence does not match any prompt template")]
    UnrecognizedPrompt,

    #[error("structure token {surface:?} at position {position} leaked into the synthesizer input")]
    FormatLeak { surface: String, position: usize },

    #[error("non-finite importance ratio for group {group}, sample {sample}")]
    NonFiniteRatio { group: usize, sample: usize },

    #[error("non-finite gradient after step {step}")]
    NonFiniteGradient { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("reports were computed on different evaluation sets")]
    MismatchedEvalSets,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
