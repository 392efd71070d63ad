// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Result alias used throughout `lenslab`.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A tensor declared by the model schema is absent from the manifest.
    #[error("missing tensor: {0}")]
    MissingTensor(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in tensor {0}")]
    NonFinite(String),

    #[error("invalid bundle: {0}")]
    Bundle(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("missing surprisal for {seq_id} word indices {indices:?}")]
    MissingSurprisal { seq_id: String, indices: Vec<usize> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("translator training diverged at layer {layer}, step {step}")]
    Diverged { layer: usize, step: usize },

    #[error("numerical error: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
