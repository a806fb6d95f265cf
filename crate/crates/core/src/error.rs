use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("depth map is {width}x{height}; Sobel gradients need at least 3x3")]
    DimensionTooSmall { width: usize, height: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no valid pixels")]
    AllInvalid,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("non-positive depth {value} at pixel ({u}, {v})")]
    NonPositiveDepth { u: usize, v: usize, value: f64 },

    #[error("point cloud would be empty: no valid pixels")]
    EmptyCloud,

    #[error("ground-truth edge band is empty")]
    NoEdges,

    #[error("input size {height}x{width} is not divisible by 32")]
    SizeNotDivisible { height: usize, width: usize },

    #[error("scale index {0} out of range 0..5")]
    InvalidScale(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible scene configuration: {0}")]
    Infeasible(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("loss became non-finite ({loss}) at batch {batch_id}")]
    Divergence { batch_id: String, loss: f64 },

    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 configuration/argument, 3 I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            Error::Sample { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
