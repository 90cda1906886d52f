// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by plansite.
#[non_exhaustive]
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file could not be read or written.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// Offending path.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// A pronouncing-dictionary line failed to parse.
    #[error("lexicon line {line}: {message}")]
    LexiconParse {
        /// 1-based line number.
        line: usize,
        /// What was wrong with it.
        message: String,
    },

    /// No word could be extracted from a line of text.
    #[error("no final word in line {0:?}")]
    NoFinalWord(String),

    /// Dataset-level validation failure.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Relative positions could not be resolved against a token sequence.
    #[error("position resolution failed: {0}")]
    Position(String),

    /// A prompt-pair specification was rejected.
    #[error("prompt pair {pair_id} rejected: {reason}")]
    PairRejected {
        /// Pair identifier from the pair fixture file.
        pair_id: String,
        /// Why it was rejected.
        reason: String,
    },

    /// The model family is not covered by any adapter.
    #[error("unsupported architecture {family:?}; known layouts: {known}")]
    UnsupportedArchitecture {
        /// The family that was requested.
        family: String,
        /// Comma-separated list of supported families.
        known: String,
    },

    /// Model weights or configuration were unusable.
    #[error("model load error: {0}")]
    ModelLoad(String),

    /// A hook site is out of range for the model or sequence.
    #[error("hook site out of range: {0}")]
    SiteRange(String),

    /// A patch vector has the wrong width for its site.
    #[error("patch width mismatch at {site}: expected {expected}, got {got}")]
    PatchWidth {
        /// Site description.
        site: String,
        /// Width dictated by the component.
        expected: usize,
        /// Width supplied.
        got: usize,
    },

    /// Tokenizer failure.
    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    /// Probe training or evaluation failure.
    #[error("probe error: {0}")]
    Probe(String),

    /// Invalid arguments to a statistical routine.
    #[error("statistics error: {0}")]
    Stats(String),

    /// Intervention or circuit experiment failure.
    #[error("intervention error: {0}")]
    Intervention(String),

    /// Text-generation provider failure.
    #[error("provider error: {0}")]
    Provider(String),

    /// Experiment config failed validation.
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    /// Run-record problems (parse, provenance, replay mismatch).
    #[error("run record error: {0}")]
    Record(String),

    /// Report rendering failure.
    #[error("report error: {0}")]
    Report(String),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
