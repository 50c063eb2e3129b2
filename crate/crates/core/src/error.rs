//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values where finite ones are required.
    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    /// A loss term went NaN/Inf during training; the run aborts.
    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    /// API contract violated (e.g. backward from a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad input data (e.g. non-binary mask fed to an encoder).
    #[error("invalid input: {0}")]
    Input(String),

    /// Malformed image file; `offset` is the byte position of the problem.
    #[error("image format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Invalid configuration value or file.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint: bad magic (not a checkpoint file)")]
    CheckpointMagic,

    /// Checkpoint format version unsupported by this build.
    #[error("checkpoint: unsupported format version {0}")]
    CheckpointVersion(u32),

    /// Checkpoint digest does not match its payload (corruption).
    #[error("checkpoint: content digest mismatch (file corrupted)")]
    CheckpointDigest,

    /// A stored tensor disagrees with the architecture implied by the
    /// checkpoint's own config.
    #[error("checkpoint: tensor `{tensor}` has shape {stored:?}, expected {expected:?}")]
    CheckpointShape {
        tensor: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// `true` for errors caused by user-supplied configuration rather than
    /// runtime failures; the CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
