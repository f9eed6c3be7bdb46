use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("partition too short for a {need}-step window: {detail}")]
    PartitionTooShort { detail: String, need: usize },

    #[error("attention: {0}")]
    Attention(String),

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by NaN/Inf values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

/// Attaches a stage name to errors raised inside a forward pass.
pub trait StageContext<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: name.to_string(),
                source: Box::new(e),
            },
        })
    }
}
