use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output (numeric overflow)")]
    NumericOverflow { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: tape already consumed; record a new forward pass")]
    DeadTape,

    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite loss in component `{component}`")]
    NonFiniteLoss { component: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u8,
        expected: u8,
    },

    #[error("missing file {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
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
}
