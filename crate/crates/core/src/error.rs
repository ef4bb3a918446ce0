use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding row {token} has zero norm")]
    ZeroNormRow { token: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("token index {index} out of range for a vocabulary of {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("token {0} appears more than once in the set")]
    DuplicateToken(usize),

    #[error("token set is empty")]
    EmptySet,

    #[error("selected tokens carry zero probability mass")]
    ZeroMass,

    #[error("no finite logit")]
    NoFiniteLogits,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("joint support of {size} tokens exceeds the exact transport cap of {cap}; use the surrogate path")]
    SupportTooLarge { size: usize, cap: usize },

    #[error("pool of {size} tokens exceeds the exhaustive search cap of {cap}")]
    PoolTooLarge { size: usize, cap: usize },

    #[error("potential is not 1-Lipschitz on pair ({i}, {j}): |f(i) - f(j)| = {gap} > d(i, j) = {dist}")]
    NotLipschitz { i: usize, j: usize, gap: f64, dist: f64 },

    #[error("potential is not anchored: f({token}) = {value} on the anchor set")]
    NotAnchored { token: usize, value: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownConfigKey { key: String, valid: String },

    #[error("trace: {0}")]
    Trace(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Errors caused by malformed input data rather than by misuse of the API.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::ZeroNormRow { .. }
                | Error::NonFinite { .. }
                | Error::Dimension(_)
                | Error::NoFiniteLogits
                | Error::Trace(_)
                | Error::Hypothesis(_)
        )
    }
}
