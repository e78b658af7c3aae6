//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),

    #[error("utterance {id:?}: severity {severity} out of range (expected 0, 1 or 2)")]
    SeverityOutOfRange { id: String, severity: i64 },

    #[error("invalid utterance {id:?}: {msg}")]
    InvalidUtterance { id: String, msg: String },

    #[error("alignment entry {index}: {msg}")]
    Alignment { index: usize, msg: String },

    #[error("bad magic in {path} (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} in {path}")]
    BadVersion { path: PathBuf, found: u16 },

    #[error("{path}: payload size mismatch (expected {expected} bytes, found {found})")]
    PayloadMismatch { path: PathBuf, expected: usize, found: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{op}: shape mismatch: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },

    #[error("unknown phoneme {0:?}")]
    UnknownPhoneme(String),

    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),

    #[error("unknown word {0:?} (no lexicon entry and letter fallback disabled)")]
    UnknownWord(String),

    #[error("coefficient {name} = {value} outside [0, 2]")]
    CoefficientRange { name: &'static str, value: f64 },

    #[error("severity group {severity} has no usable utterances: {msg}")]
    EmptySeverityGroup { severity: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("synthesis produced no frames for {id:?} (all durations rounded to zero)")]
    EmptyOutput { id: String },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
