use thiserror::Error;

pub type Result<T> = std::result::Result<T, QnnError>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum QnnError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QnnError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        QnnError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code used by the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            QnnError::Numeric(_) => 3,
            QnnError::Data(_)
            | QnnError::Schema(_)
            | QnnError::Format(_)
            | QnnError::Integrity(_)
            | QnnError::Version { .. }
            | QnnError::MetricUndefined(_)
            | QnnError::Io(_) => 2,
            QnnError::Dimension { .. }
            | QnnError::Argument(_)
            | QnnError::Config(_)
            | QnnError::Json(_) => 1,
        }
    }
}
