//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by corpus construction, tokenization, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown language code `{code}` at line {line}")]
    UnknownLanguage { code: String, line: usize },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("corpus construction error: {0}")]
    Corpus(String),

    #[error("orthography for language `{code}` is not uniquely decodable: {reason}")]
    Undecodable { code: String, reason: String },

    #[error("undecodable span at character offset {offset} in `{text}`")]
    TokenizeSpan { offset: usize, text: String },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("phoneme id {id} out of range (inventory size {inventory})")]
    PhonemeRange { id: usize, inventory: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("output `{0}` exists; pass --force to overwrite")]
    WouldOverwrite(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
