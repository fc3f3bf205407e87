use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {value} at row {row} is not binary")]
    InvalidLabel { row: usize, value: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("privacy loss is unbounded (σ = 0 with q > 0)")]
    UnboundedPrivacyLoss,

    #[error("order grid is empty")]
    EmptyGrid,

    #[error("scores need at least one positive and one negative label")]
    SingleClass,

    #[error("site `{0}` is inactive")]
    InactiveSite(String),

    #[error("no active sites")]
    NoActiveSites,

    #[error("unknown site `{0}`")]
    UnknownSite(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
