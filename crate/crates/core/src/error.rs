use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("singular parameterization: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint decode error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("detector reached accuracy {accuracy:.4} < {required:.2}; retry with a larger n_samples")]
    DetectorAccuracy { accuracy: f64, required: f64 },

    #[error("llm configuration: {0}")]
    LlmConfig(String),

    #[error("llm request failed: {0}")]
    LlmRequest(String),

    #[error("llm endpoint returned status {status}: {body}")]
    LlmStatus { status: u16, body: String },

    #[error("llm response malformed: {0}")]
    LlmResponse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
