use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the library. Variants carry enough context (column,
/// region, file and line) for the CLI to emit a machine-readable record.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("missing or non-finite values in used cells: {}", .offenders.join(", "))]
    MissingValues { offenders: Vec<String> },

    #[error("{}:{line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("missing date {date} for region `{region}`")]
    MissingDate { region: String, date: String },

    #[error("unknown region `{region}` in {context}")]
    UnknownRegion { region: String, context: String },

    #[error("zero-variance column `{0}`")]
    ZeroVariance(String),

    #[error("design is rank deficient; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("{what} did not converge: {detail}")]
    NonConvergence { what: String, detail: String },

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidData(_) => "invalid_data",
            Error::MissingColumn(_) => "missing_column",
            Error::MissingValues { .. } => "missing_values",
            Error::Parse { .. } => "parse",
            Error::MissingDate { .. } => "missing_date",
            Error::UnknownRegion { .. } => "unknown_region",
            Error::ZeroVariance(_) => "zero_variance",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Positivity(_) => "positivity",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
