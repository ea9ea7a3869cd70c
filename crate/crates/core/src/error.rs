use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, partition, population or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A slot id outside its vocabulary.
    #[error("input error: slot {slot} id {id} out of range (vocab {vocab})")]
    Input { slot: usize, id: u32, vocab: usize },

    /// A violated API precondition (shape mismatch, empty batch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// AUC requested on a log holding a single class.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Contract(_) | Error::Input { .. } | Error::UndefinedMetric(_) => 4,
            Error::Parse { .. } | Error::Schema(_) => 5,
            Error::Checkpoint(_) => 6,
        }
    }
}
