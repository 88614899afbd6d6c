use thiserror::Error;

/// Errors raised anywhere in the pre-training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unknown dataset id {0}")]
    UnknownDataset(u32),
    #[error("unregistered norm site `{0}`")]
    UnknownSite(String),
    #[error("checkpoint is missing parameter group `{0}`")]
    MissingGroup(String),
    #[error("shape drift for parameter `{name}`: stored {stored:?}, expected {expected:?}")]
    ShapeDrift {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
