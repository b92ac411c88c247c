use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("all positions masked in {0}")]
    AllMasked(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("incomplete coalition table: mask {0:#b} missing")]
    IncompleteTable(u32),

    #[error("{n} coalition groups exceed the enumeration cap of {cap}")]
    TooManyGroups { n: usize, cap: usize },

    #[error("empty background data")]
    EmptyBackground,

    #[error("deadline exceeded after {calls} model calls")]
    DeadlineExceeded { calls: u64 },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures caused by the arithmetic itself (NaN/Inf, divergence)
    /// rather than by bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}
