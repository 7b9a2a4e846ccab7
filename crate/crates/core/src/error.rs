use std::path::PathBuf;

use crate::config::Modality;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("shape mismatch for {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("modality {0} is not valid here")]
    WrongModality(Modality),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported character {ch:?} at offset {offset}")]
    Tokenize { ch: char, offset: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite values in {0}")]
    Numeric(String),

    #[error("sequence of {len} tokens exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{modality} projection expects {expected} signal states, got {got}")]
    SignalCountMismatch {
        modality: Modality,
        expected: usize,
        got: usize,
    },

    #[error("diffusion decoder for {0} has not been trained")]
    UntrainedDecoder(Modality),

    #[error("no decoder checkpoint for activated modality {0}; run backbone pretraining first")]
    MissingDecoder(Modality),

    #[error("unknown training stage {0}")]
    UnknownStage(u8),

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("dangling reference: {0}")]
    DanglingRef(String),

    #[error("invalid dialogue: {0}")]
    Dialogue(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
