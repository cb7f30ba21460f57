use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("weight entry `{name}`: expected dims {expected:?}, found {found:?}")]
    EntryShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight entry `{0}` missing from file")]
    MissingEntry(String),

    #[error("unexpected weight entry `{0}`")]
    UnexpectedEntry(String),

    #[error("input has zero spectral energy")]
    ZeroEnergy,

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

macro_rules! ensure_shape {
    ($cond:expr, $($arg:tt)+) => {
        // negated so a NaN comparison fails the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::Shape(format!($($arg)+)));
        }
    };
}

macro_rules! ensure_arg {
    ($cond:expr, $($arg:tt)+) => {
        // negated so a NaN comparison fails the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure_arg;
pub(crate) use ensure_shape;
