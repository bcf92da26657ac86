use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or writing the binary containers
/// (teacher dumps and parameter checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },
    #[error("truncated payload: needed {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("label {label} at row {row} out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: u32,
        num_classes: u32,
    },
    #[error("non-finite value in {block} block")]
    NonFinite { block: &'static str },
    #[error("inconsistent header: {0}")]
    Header(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: row {row} has zero norm")]
    ZeroNormRow { op: &'static str, row: usize },
    #[error("{op} needs a batch of at least {needed}, got {got}")]
    InsufficientBatch {
        op: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("weight {weight} is positive but the {component} term was not supplied")]
    MissingComponent {
        component: &'static str,
        weight: &'static str,
    },
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("frozen parameters changed: {0}")]
    FrozenMutated(&'static str),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing required ledger phase `{0}`")]
    MissingPhase(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
