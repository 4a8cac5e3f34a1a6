use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("symbol {symbol} out of range for a table of {levels} levels")]
    SymbolOutOfRange { symbol: usize, levels: usize },

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("corrupted payload: {0}")]
    Corrupted(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unknown anchor id {0}")]
    UnknownAnchor(u16),

    #[error("unknown derivation id {derivation} for anchor {anchor}")]
    UnknownDerivation { anchor: u16, derivation: u16 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("image format: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
