use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bit-string length mismatch: expected {expected} {kind} bits, got {got}")]
    LengthMismatch {
        kind: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("history code {code} out of range for horizon {horizon}")]
    CodeOutOfRange { code: u64, horizon: usize },

    #[error("stage {stage} out of range for horizon {horizon}")]
    StageOutOfRange { stage: usize, horizon: usize },

    #[error("horizon {0} exceeds the exact-table limit {1}")]
    HorizonTooLarge(usize, usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid probability table: {0}")]
    InvalidTable(String),

    #[error("root solve failed: {0}")]
    RootSolve(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("coefficient vector has length {got}, spec requires {expected}")]
    CoefficientLength { expected: usize, got: usize },

    #[error("missing covariate `{0}`")]
    MissingCovariate(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("csv parse error at line {line}, column `{column}`: {message}")]
    CsvValue {
        line: usize,
        column: String,
        message: String,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("bootstrap dropped {dropped} of {total} replicates (limit 10%)")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("covariance matrix is singular on the tested subset; increase the bootstrap replicate count")]
    SingularCovariance,

    #[error("invalid regime: {0}")]
    InvalidRegime(String),
}
