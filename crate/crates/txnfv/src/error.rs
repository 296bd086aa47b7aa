//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("a batch is already open")]
    BatchAlreadyOpen,

    #[error("batch is sealed")]
    BatchSealed,

    #[error("illegal status transition for op {op}: {from} -> {to}")]
    IllegalTransition { op: u32, from: &'static str, to: &'static str },

    #[error("transaction already committed")]
    AlreadyCommitted,

    #[error("duplicate version for key by same transaction")]
    DuplicateVersion,

    #[error("uncommitted version survived batch commit (engine bug)")]
    DanglingUncommitted,

    #[error("handler rejected packet: {0}")]
    HandlerRejected(String),

    #[error("unknown handler `{0}`")]
    UnknownHandler(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
