use thiserror::Error;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading a checkpoint container.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected \"PRSP\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("record count mismatch: header declares {declared}, file holds {found}")]
    RecordCount { declared: u32, found: u32 },
    #[error("corrupt record: {0}")]
    Shape(String),
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("container holds a {found} checkpoint, expected {expected}")]
    WrongKind {
        found: &'static str,
        expected: &'static str,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("character {0:?} is outside the model alphabet")]
    OutOfAlphabet(char),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// True when the failure is a NaN/Inf detected during computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numerics(NumericsError::NonFinite(_)))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_))
    }
}
