use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("malformed contraction `{spec}`: {reason}")]
    Contraction { spec: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("line {line}: code `{code}` is not in the dictionary")]
    UnknownCode { code: String, line: usize },

    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { id: String, line: usize },

    #[error("embedding dimension {found} does not match configured {expected}")]
    EmbeddingDim { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint codes missing from dictionary: {0:?}")]
    CodeMismatch(Vec<String>),

    #[error("output path {0} already exists (use --force to overwrite)")]
    Exists(PathBuf),

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by input files rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::UnknownCode { .. }
                | Error::DuplicateId { .. }
                | Error::EmbeddingDim { .. }
                | Error::CodeMismatch(_)
                | Error::Version(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Empty(_)
        )
    }
}
