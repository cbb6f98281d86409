use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty cluster: fine cluster {0} has no units")]
    EmptyCluster(usize),

    #[error("unknown fine cluster: unit {unit} assigned to fine cluster {fine} but only {declared} are declared")]
    UnknownFineCluster { unit: usize, fine: usize, declared: usize },

    #[error("fine cluster `{fine}` appears in more than one gross cluster (`{first}` and `{second}`)")]
    NotNested { fine: String, first: String, second: String },

    #[error("cluster labels are not contiguous after normalization")]
    NonContiguousLabels,

    #[error("length mismatch: {what} has length {found}, expected {expected}")]
    LengthMismatch { what: &'static str, found: usize, expected: usize },

    #[error("at least {required} clusters are required at the {level} level, found {found}")]
    TooFewClusters { level: &'static str, required: usize, found: usize },

    #[error("gross map is not a regrouping of fine clusters with the observed composition")]
    InvalidGrossMap,

    #[error("target regressor `{0}` has no variation after partialling out the other regressors and fixed effects")]
    CollinearTarget(String),

    #[error("regressor matrix is rank deficient (rank {rank} < {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },

    #[error("HC1 factor undefined: n = {n} must exceed the regressor count {k}")]
    NotEnoughDegreesOfFreedom { n: usize, k: usize },

    #[error("regression for gross cluster {gross} failed: {source}")]
    GrossClusterFit { gross: usize, source: Box<Error> },

    #[error("fine-clustered standard error of gross cluster {0} is zero")]
    ZeroStandardError(usize),

    #[error("{count} distinct regroupings exceed the enumeration cap of {cap}")]
    EnumerationCap { count: String, cap: u64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("iteration {iteration}: {source}")]
    Iteration { iteration: usize, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;
