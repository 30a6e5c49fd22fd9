use thiserror::Error;

/// Errors raised across the modeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("column `{0}` has zero variance")]
    DegenerateColumn(String),

    #[error("no subjects remain after preprocessing")]
    EmptyCohort,

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("no events in the data")]
    NoEvents,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("hessian is singular even after ridge fallback")]
    Singular,

    #[error("inference refused: {0}")]
    InferenceRefused(String),

    #[error("horizon {horizon} is beyond the last observed time {max_time}")]
    Extrapolation { horizon: f64, max_time: f64 },

    #[error("concordance undefined: no comparable pairs")]
    UndefinedConcordance,

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("no features survived the univariate screen")]
    EmptyScreen,

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Divergence {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },

    #[error("learning rate estimation failed: {0}")]
    LrEstimation(String),

    #[error("search failed: all {0} trials failed")]
    SearchFailed(usize),
}

impl Error {
    /// True for failures caused by invalid input or configuration rather
    /// than by the numerics of a fit.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Schema(_)
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::Shape { .. }
                | Error::Extrapolation { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
