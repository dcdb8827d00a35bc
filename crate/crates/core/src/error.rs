use std::io;

use thiserror::Error;

/// Errors produced by the embedding, adapter, training, matching and I/O layers.
#[derive(Debug, Error)]
pub enum NidsError {
    #[error("no foreground patch in grid{}", fmt_index(.index))]
    EmptyForeground { index: Option<(usize, usize)> },

    #[error("zero-norm embedding{}", fmt_index(.index))]
    ZeroVector { index: Option<(usize, usize)> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate contrastive batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),

    #[error("both masks are empty")]
    EmptyUnion,

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("duplicate record name {0:?}")]
    DuplicateName(String),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("missing record {0:?}")]
    MissingRecord(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn fmt_index(index: &Option<(usize, usize)>) -> String {
    match index {
        Some((a, b)) => format!(" at ({a}, {b})"),
        None => String::new(),
    }
}

pub type Result<T, E = NidsError> = std::result::Result<T, E>;
