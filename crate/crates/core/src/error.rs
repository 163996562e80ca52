use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `detail` names the offending axis.
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller broke an operation's preconditions (non-scalar loss, stepping past R, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Every violated configuration constraint, collected before failing.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    /// Input outside a function's mathematical domain (zero-power reference, silent noise).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values where finite ones were required.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),

    #[error("shape mismatch for tensor {name}: stored {stored:?}, expected {expected:?}")]
    TensorShape { name: String, stored: Vec<usize>, expected: Vec<usize> },

    /// Truncated or structurally corrupt file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("sample rate mismatch in {path}: file has {found} Hz, expected {expected} Hz")]
    SampleRate { path: PathBuf, found: u32, expected: u32 },

    #[error("training diverged: non-finite loss at step {step} (batch {batch_id}, examples {examples:?})")]
    NonFiniteLoss { step: usize, batch_id: usize, examples: Vec<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
