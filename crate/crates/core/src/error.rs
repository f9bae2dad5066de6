use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}: line {line}, column {column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank-deficient constraint: {0}")]
    RankDeficient(String),

    #[error("insufficient replicates in group {group}: found {found}, need at least 2")]
    InsufficientReplicates { group: String, found: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category used by the CLI and the C ABI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::InvalidInput(_) => "invalid_input",
            Error::RankDeficient(_) => "rank_deficient",
            Error::InsufficientReplicates { .. } => "insufficient_replicates",
            Error::Infeasible(_) => "infeasible",
            Error::Budget(_) => "budget_exceeded",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
