use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to act on the
/// failure without a backtrace: shapes for shape errors, the line for
/// parse errors, the step and learning rate for divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    #[error("index out of range in {op}: {details}")]
    Index { op: &'static str, details: String },

    #[error("invalid value in {op}: {details}")]
    Numeric { op: &'static str, details: String },

    #[error("empty selection in {0}: no positions contribute to the loss")]
    EmptySelection(&'static str),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint magic mismatch: expected \"PLM1\", found {found:?}")]
    CheckpointMagic { found: [u8; 4] },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("training diverged at step {step} (lr {lr:e}): loss is not finite")]
    Diverged { step: usize, lr: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the command-line front end: usage, config, parse and
    /// I/O problems map to 2, divergence to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
