use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("pairing policy: {0}")]
    Policy(String),

    #[error("modality mismatch: expected {expected}, got {actual}")]
    ModalityMismatch {
        expected: crate::world::Modality,
        actual: crate::world::Modality,
    },

    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("malformed data at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("checkpoint entry `{0}` is missing")]
    MissingEntry(String),

    #[error("checkpoint entry `{name}` has dims {found:?}, expected {expected:?}")]
    EntryDims {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
