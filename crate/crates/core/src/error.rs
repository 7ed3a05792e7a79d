use thiserror::Error;

/// Errors produced by the alignment objective, its solvers and the training harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("zero-norm vector in {matrix} row {row}")]
    ZeroNormRow { matrix: &'static str, row: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("objective not finite")]
    NonFiniteObjective,

    #[error("image not divisible by patch size ({height}x{width}, patch {patch_size})")]
    NotDivisible {
        height: usize,
        width: usize,
        patch_size: usize,
    },

    #[error("no visible patches")]
    NoVisiblePatches,

    #[error("token id {id} out of vocabulary of size {vocab_size}")]
    OutOfVocabulary { id: usize, vocab_size: usize },

    #[error("modality mismatch: expected {expected}, found {found}")]
    ModalityMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("non-finite value in IPOT at outer iteration {iteration}; try a larger beta")]
    IpotNonFinite { iteration: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
