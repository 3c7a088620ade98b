use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("infeasible alignment: {0}")]
    Infeasible(String),

    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical abort: {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("missing array `{0}` in checkpoint")]
    MissingArray(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from non-finite values during training or sampling.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
