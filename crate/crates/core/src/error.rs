use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: u32, vocab: usize },

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("unsupported language `{0}`")]
    UnsupportedLanguage(String),

    #[error("template `{template}` is missing slot ${slot}")]
    MissingSlot { template: String, slot: String },

    #[error("unknown dataset kind `{0}`")]
    UnknownDataset(String),

    #[error("unknown stage `{0}`")]
    UnknownStage(String),

    #[error("unknown label `{label}` for task {task}")]
    UnknownLabel { task: String, label: String },

    #[error("machine translation failed: {0}")]
    Translation(String),

    #[error("loss became non-finite at step {step} (loss = {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("missing predictions for {} example(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
