use thiserror::Error;

pub type Result<T> = std::result::Result<T, SctsError>;

#[derive(Debug, Error)]
pub enum SctsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix has numerical rank below {requested}: sigma_{requested}/sigma_1 = {ratio:e}")]
    RankDeficient { requested: usize, ratio: f64 },

    /// Zero-based record and field of the file, header and id column included.
    #[error("ingest error at row {row}, column {column}: {message}")]
    Ingest {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("ingest error: {0}")]
    IngestFile(String),

    #[error("unit index {index} out of range for panel with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("synthetic control weights need at least one pre-treatment epoch")]
    NoPreTreatment,

    #[error("vanilla synthetic control estimator requires a_t = 1 for every treatment epoch; use estimate_scts for adaptive designs")]
    MixedActions,

    #[error("difference in means needs both treated and untreated treatment epochs")]
    SingleValuedActions,

    #[error("experiment history has no donor panel")]
    MissingDonorPanel,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SctsError {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            SctsError::Config(_) | SctsError::Dimension(_) => 2,
            _ => 3,
        }
    }
}
