use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: String, detail: String },

    /// Input values outside an operation's domain.
    #[error("{op}: {detail}")]
    Domain { op: String, detail: String },

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),

    #[error("backward needs a scalar output or an explicit seed (output shape {0:?})")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DiffError {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        DiffError::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn domain(op: &str, detail: impl Into<String>) -> Self {
        DiffError::Domain {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    /// Prefixes a shape error with the name of the layer that raised it.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            DiffError::Shape { op, detail } => DiffError::Shape {
                op: format!("{layer}/{op}"),
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, DiffError>;
