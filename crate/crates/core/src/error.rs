use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, bit widths, or other caller-supplied configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Violated internal invariant (e.g. a zero-norm codeword reached the hard-attention path).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("idx parse error: {0}")]
    Idx(#[from] IdxError),

    /// Training produced a NaN or infinite value.
    #[error("non-finite value in {tensor} (epoch {epoch}, step {step})")]
    NonFinite {
        tensor: String,
        epoch: usize,
        step: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("truncated header")]
    TruncatedHeader,
    #[error("wrong magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}
