use thiserror::Error;

pub type Result<T, E = MlrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MlrError {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("level {level}: group {group} is not nested inside a single parent group")]
    NotNested { level: usize, group: String },

    #[error("level {level}: group {group} is empty")]
    EmptyGroup { level: usize, group: String },

    #[error("partitions do not share the same feature count ({left} vs {right})")]
    PartitionMismatch { left: usize, right: usize },

    #[error("{what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} must be positive at index {index} (got {value})")]
    NonPositive {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dense materialization of n = {n} exceeds the cap of {cap}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("numerical consistency failure: {0}")]
    Numerical(String),

    #[error("log-likelihood became non-finite at iteration {iteration}")]
    NonFiniteLikelihood { iteration: usize },

    #[error("covariate matrix is rank deficient (Gram condition estimate {condition:.3e}); remove collinear covariates")]
    RankDeficientCovariates { condition: f64 },

    #[error("matrix is singular or not positive definite: {0}; consider shrinkage")]
    Singular(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("feature label `{0}` is not present in the hierarchy")]
    UnknownFeature(String),

    #[error("feature label `{0}` appears more than once")]
    DuplicateFeature(String),

    #[error("feature label `{0}` from the hierarchy is missing in the data")]
    MissingFeature(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl MlrError {
    /// Stable machine-readable identifier, used by the CLI and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            MlrError::Structural(_) => "structural",
            MlrError::NotNested { .. } => "not_nested",
            MlrError::EmptyGroup { .. } => "empty_group",
            MlrError::PartitionMismatch { .. } => "partition_mismatch",
            MlrError::Dimension { .. } => "dimension_mismatch",
            MlrError::NonPositive { .. } => "non_positive",
            MlrError::InvalidArgument(_) => "invalid_argument",
            MlrError::DenseCapExceeded { .. } => "dense_cap_exceeded",
            MlrError::Numerical(_) => "numerical",
            MlrError::NonFiniteLikelihood { .. } => "non_finite_likelihood",
            MlrError::RankDeficientCovariates { .. } => "rank_deficient_covariates",
            MlrError::Singular(_) => "singular",
            MlrError::Parse { .. } => "parse",
            MlrError::UnknownFeature(_) => "unknown_feature",
            MlrError::DuplicateFeature(_) => "duplicate_feature",
            MlrError::MissingFeature(_) => "missing_feature",
            MlrError::SchemaVersion { .. } => "schema_version",
            MlrError::Io(_) => "io",
            MlrError::Json(_) => "json",
            MlrError::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(MlrError::Dimension {
            what,
            expected,
            found,
        })
    }
}
