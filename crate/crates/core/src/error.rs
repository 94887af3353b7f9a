use thiserror::Error;

pub type Result<T> = std::result::Result<T, CdetError>;

#[derive(Debug, Error)]
pub enum CdetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("no usable rows in {0}")]
    NoUsableRows(String),

    #[error("support trimming removed every row of the second sample; increase the first sample size")]
    AllRowsTrimmed,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CdetError {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Self::Precondition(msg.into())
    }
}
