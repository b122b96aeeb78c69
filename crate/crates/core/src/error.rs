use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range (size {size}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("sequence of length {len} exceeds the maximum length {max}")]
    Length { len: usize, max: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("cannot transfer parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    Transfer {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing annotation: {0}")]
    MissingAnnotation(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("example `{example}` needs {tokens} padded tokens but the batch budget is {budget}")]
    Oversize {
        example: String,
        tokens: usize,
        budget: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model has no context integration (integration mode None)")]
    NoContext,

    #[error("integration mode {0} has no gate")]
    NoGate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input data rather than bad configuration or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Oversize { .. }
                | Error::MissingAnnotation(_)
                | Error::Index { .. }
                | Error::Length { .. }
        )
    }
}
