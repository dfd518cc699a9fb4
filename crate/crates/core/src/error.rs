use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("epoch index must be >= 1, got {0}")]
    InvalidEpoch(usize),

    #[error("scene has no transceivers but the epoch requires them")]
    MissingTransceivers,

    #[error("position {position:?} coincides with anchor {anchor}; range Jacobian is undefined")]
    SingularGeometry { anchor: &'static str, position: Vec<f64> },

    #[error("clock model violated: N*T_u = {node_span} ns < M*T_m = {master_span} ns")]
    ModelViolation { node_span: f64, master_span: f64 },

    #[error("invalid ground truth: {0}")]
    InvalidTruth(String),

    #[error("transmission schedule violated: {0}")]
    ScheduleViolation(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parameters not yet identifiable: {0}")]
    NotIdentifiable(String),

    #[error("profiled residual energy is zero; the log-likelihood is singular (floor V0 to continue)")]
    LogSingularity,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{key}`: {reason}")]
    ConfigKey { key: String, reason: String },

    #[error("estimator failed in {failed} of {trials} trials")]
    TooManyFailures { failed: usize, trials: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn key(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ConfigKey {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user-supplied configuration.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::ConfigKey { .. }
                | Error::InvalidParameter(_)
                | Error::MissingTransceivers
                | Error::ModelViolation { .. }
                | Error::InvalidTruth(_)
                | Error::ScheduleViolation(_)
        )
    }
}
