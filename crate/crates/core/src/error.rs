use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced (numeric overflow)")]
    NumericOverflow { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at optimizer step {step} (last good step {last_good_step}): {reason}")]
    Diverged {
        step: usize,
        last_good_step: usize,
        reason: String,
    },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
