use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch between {what}: {left:?} vs {right:?}")]
    ShapeMismatch {
        what: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("bad magic {0:?}, expected \"RCDT\"")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated tensor file: need {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("empty valid set: {0}")]
    EmptyValidSet(String),

    #[error("non-positive prediction {value} at pixel {index} inside the valid set")]
    NonPositivePrediction { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {term} is not finite")]
    Divergence { step: usize, term: String },

    #[error("unknown gradient-check op \"{0}\"")]
    UnknownOp(String),

    #[error("cannot aggregate reports with different caps ({0} m vs {1} m)")]
    MixedCaps(f64, f64),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn mismatch(what: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
