use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate features for `{prompt}`: norm {norm:e} <= {eps:e}")]
    DegenerateFeatures { prompt: String, norm: f64, eps: f64 },

    #[error("stale base fact for `{prompt}`: expected argmax {expected}, model predicts {actual}")]
    StaleBaseFact {
        prompt: String,
        expected: usize,
        actual: String,
    },

    #[error("singular Gram matrix (condition estimate {condition:e})")]
    SingularGram { condition: f64 },

    #[error("degenerate adapter: delta is zero")]
    DegenerateAdapter,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate basis: mixture directions are linearly dependent")]
    DegenerateBasis,

    #[error("minimality oracle did not converge after {iterations} iterations (last objectives {trace:?})")]
    OracleFailed { iterations: usize, trace: Vec<f64> },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
