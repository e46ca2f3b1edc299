use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate batch: HSIC needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("hidden layer index {index} out of range for a network with {layers} hidden layers")]
    LayerIndex { index: usize, layers: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("rehearsal buffer is empty")]
    EmptyBuffer,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
