//! Error type shared by every module in the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or Inf appeared in an operation output.
    #[error("non-finite value produced by `{op}` (graph node {node})")]
    NonFinite { op: &'static str, node: usize },

    /// Numerical failure outside the graph (diverged loss, failed check).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed file: bad magic, version, digest, or truncation.
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Invalid configuration (bad key, bad value, violated constraint).
    #[error("config error: {0}")]
    Config(String),

    /// Tokenizer / vocabulary problem.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<String>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// True for errors caused by unreadable or corrupt data files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Io(_) | Error::Vocab(_) | Error::Config(_)
        )
    }

    /// True for numerical aborts (NaN/Inf, divergence).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numerical(_))
    }
}
