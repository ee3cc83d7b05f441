use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("thin SVD failed to converge after {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error("adapter ranks differ ({expected} vs {found}); zero-pad the cohort to a common rank first")]
    RankMismatch { expected: usize, found: usize },

    #[error("cannot pad rank-{rank} adapter down to rank {target}")]
    TargetRankTooSmall { rank: usize, target: usize },

    #[error("invalid aggregation weights: {0}")]
    InvalidWeights(String),

    #[error("energy threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),

    #[error("singular values not sorted non-increasing at index {index}")]
    UnsortedSpectrum { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("per-layer ranks are required for this method")]
    MissingLayerRanks,

    #[error("total rank is zero; efficiency is undefined")]
    ZeroTotalRank,

    #[error("local training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension inconsistency: {0}")]
    DimensionInconsistency(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::InvalidThreshold(_) => ErrorKind::Config,
            Error::Io(_)
            | Error::MalformedHeader(_)
            | Error::DimensionInconsistency(_)
            | Error::TruncatedPayload { .. } => ErrorKind::Io,
            Error::Round { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }
}
