use thiserror::Error;

/// Errors produced by model construction, inference, and training.
#[derive(Debug, Error)]
pub enum SwirlError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("data error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl SwirlError {
    pub fn data(msg: impl Into<String>) -> Self {
        SwirlError::Data {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn data_at(line: usize, msg: impl Into<String>) -> Self {
        SwirlError::Data {
            line: Some(line),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SwirlError>;
