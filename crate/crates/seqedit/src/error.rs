//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape; names the operation and both shapes.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has an unusable shape or size for the operation.
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Recoverable per-line failure while parsing an annotation dump.
    #[error("line {line}: {msg}")]
    MalformedRecord { line: u64, msg: String },

    #[error("illegal residue {ch:?} at position {pos}")]
    IllegalResidue { ch: char, pos: usize },

    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the error reflects bad user input rather than an internal
    /// failure; the CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::ShapeMismatch { .. }
            | Error::InvalidShape { .. }
            | Error::InvalidArgument(_)
            | Error::MalformedRecord { .. }
            | Error::IllegalResidue { .. }
            | Error::TokenOutOfRange { .. }
            | Error::Config(_) => true,
            Error::Io(e) => matches!(
                e.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            _ => false,
        }
    }
}
