use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the lab.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An op received tensors whose shapes cannot be combined.
    ShapeMismatch { op: &'static str, detail: String },
    /// A NaN or infinity showed up in an op output or gradient.
    NonFinite { op: &'static str },
    /// Configuration value outside its documented range, or a bad config file.
    InvalidConfig(String),
    /// A token outside the closed vocabulary.
    UnknownToken(String),
    /// World generation failed (utterance too long, bad lexicon, ...).
    World(String),
    /// A training procedure was asked to do something inconsistent.
    Train(String),
    /// Evaluation failed (empty reference, missing audio, ...).
    Eval(String),
    /// Checkpoint container is malformed or does not round-trip.
    Checkpoint(String),
    /// Filesystem failure, with the path that caused it.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::UnknownToken(tok) => write!(f, "token not in vocabulary: {tok:?}"),
            Error::World(msg) => write!(f, "world: {msg}"),
            Error::Train(msg) => write!(f, "training: {msg}"),
            Error::Eval(msg) => write!(f, "evaluation: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(format!("json: {e}"))
    }
}
