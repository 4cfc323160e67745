use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants are grouped by the CLI exit code they map to, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    // configuration
    #[error("config error: {0}")]
    Config(String),
    #[error("partition error: {0}")]
    Partition(String),

    // data
    #[error("parse error at data row {row}, column '{column}': {detail}")]
    Parse {
        row: usize,
        column: String,
        detail: String,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("dataset has no data rows")]
    EmptyDataset,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty subsample: no rows selected")]
    EmptySubsample,

    // numeric
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("non-convergence: {0}")]
    NonConvergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 config error, 3 data error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Partition(_) => 2,
            Error::Parse { .. }
            | Error::SchemaMismatch(_)
            | Error::EmptyDataset
            | Error::Domain(_)
            | Error::DimensionMismatch { .. }
            | Error::InsufficientData(_)
            | Error::EmptySubsample
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::SingularSystem(_) | Error::NonConvergence(_) => 4,
        }
    }

    /// Short machine-readable category used in structured error lines.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            _ => "numeric",
        }
    }
}
