use fsc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("word {0:?} is not in the lexicon")]
    UnknownWord(String),
    #[error("malformed lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("text input has no EOS token")]
    MissingEos,
    #[error("caption needs {needed} positions but the encoder allows {max}")]
    CaptionTooLong { needed: usize, max: usize },
    #[error("contrastive loss needs at least 2 items, got {0}")]
    BatchTooSmall(usize),
    #[error("every candidate besides the original is masked out")]
    AllInvalid,
    #[error("text has no valid tokens")]
    NoValidTokens,
    #[error("candidate probability is not positive after the epsilon guard")]
    DegenerateP,
    #[error("two objects share cell {0:?}")]
    CellCollision((usize, usize)),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("checkpoint structures differ: {0}")]
    StructureMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("evaluation suite is empty")]
    EmptySuite,
    #[error("recall@{k} needs at least {k} items, got {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("duplicate zero-shot class {0:?}")]
    DuplicateClass(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
