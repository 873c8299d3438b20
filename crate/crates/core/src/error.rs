use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id out of vocabulary: {id} >= {vocab_size}")]
    TokenOutOfVocab { id: usize, vocab_size: usize },

    #[error("no recorded computation")]
    NoRecordedComputation,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("empty batch")]
    EmptyBatch,

    #[error("contrastive batch too small: need at least 2 documents, got {0}")]
    ContrastiveBatchTooSmall(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bank exhausted")]
    BankExhausted,

    #[error("nothing to sample: every candidate is excluded")]
    NothingToSample,

    #[error("no judged relevant docs")]
    NoJudgedRelevant,

    #[error("empty input")]
    EmptyInput,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("{kind} prompt expects {expected} documents, got {got}")]
    PromptArity {
        kind: &'static str,
        expected: &'static str,
        got: usize,
    },

    #[error("could not parse {kind} response: {raw:?}")]
    ParseFailure { kind: &'static str, raw: String },

    #[error("llm transport: {0}")]
    Transport(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}:{line}: {msg}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
