use thiserror::Error;

use crate::protocol::MessageKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A NaN or infinity showed up where a finite value is required.
    #[error("arithmetic domain error: {0}")]
    Arithmetic(String),

    #[error("shape mismatch: expected dimension {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    /// The caller violated a precondition (empty input, negative scale, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A run configuration failed validation. `field` names the offending field.
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Violations of the aggregation protocol. Each variant names the parties involved.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("holder h{holder} is missing the share from h{source_id}")]
    MissingShare { holder: usize, source_id: usize },

    #[error("holder h{holder} received more than one share from h{source_id}")]
    DuplicateShare { holder: usize, source_id: usize },

    #[error("holder h{holder} received a share from h{source_id}, which is outside its cluster")]
    ForeignShare { holder: usize, source_id: usize },

    #[error("share from h{source_id} is for round {found}, expected round {expected}")]
    RoundMismatch {
        source_id: usize,
        expected: usize,
        found: usize,
    },

    #[error("expected {expected} masked sums, received {found}")]
    SumCount { expected: usize, found: usize },

    #[error("masked sum from h{holder} appears more than once")]
    DuplicateSum { holder: usize },

    #[error("round {round}: expected {kind} message from {sender} did not arrive")]
    MissingMessage {
        round: usize,
        sender: String,
        kind: MessageKind,
    },
}
