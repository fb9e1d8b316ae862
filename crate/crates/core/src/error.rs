use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// A data invariant is violated at a specific row.
    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },

    /// A data invariant is violated that is not tied to a single row.
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A basis (or design matrix) is not of full column rank.
    #[error("rank deficient: column {column} ({label}) is linearly dependent on the preceding columns")]
    RankDeficient { column: usize, label: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("zero first stage: the treatment contrast between instrument groups is zero")]
    ZeroFirstStage,

    #[error("index is not finite at row {row}")]
    NonFiniteIndex { row: usize },

    /// A fit failed in a way that makes its result unusable.
    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("bootstrap unreliable: {failed} of {total} replicates failed")]
    BootstrapUnreliable { failed: usize, total: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
