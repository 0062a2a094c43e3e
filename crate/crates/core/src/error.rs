use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    ShapeMismatch {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("probability out of range: {0}")]
    Probability(String),
    #[error("empty alphabet")]
    EmptyAlphabet,
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("model digest mismatch: stream {stream}, model {model}")]
    DigestMismatch { stream: String, model: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
