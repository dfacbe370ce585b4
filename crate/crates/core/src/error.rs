use std::path::PathBuf;

/// Errors produced by the tensor kernels, the model and the data pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("softmax row {row} has no finite entry and cannot be normalized")]
    DegenerateRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("feature {index} has zero variance on the training split")]
    ZeroVariance { index: usize },

    #[error("series of length {length} is too short: {msg}")]
    TooShort { length: usize, msg: String },

    #[error("training diverged at epoch {epoch}; last finite losses: train {last_train:?}, val {last_val:?}")]
    Diverged {
        epoch: usize,
        last_train: Option<f64>,
        last_val: Option<f64>,
    },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
