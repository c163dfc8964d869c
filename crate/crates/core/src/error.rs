use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the function (negative time
    /// offsets, evaluation outside a window, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or unresolvable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// The kernel family does not support the requested closed form.
    #[error("unsupported kernel family: {0}")]
    UnsupportedFamily(String),

    /// Event log records that failed validation, with their line numbers.
    #[error("{} invalid record(s); first: {}", .0.len(), .0.first().map(|e| e.to_string()).unwrap_or_default())]
    Validation(Vec<crate::events::LineError>),

    #[error("numeric error: {message} (residual norm {residual:e})")]
    Numeric { message: String, residual: f64 },

    /// Instruments do not span the endogenous regressors.
    #[error("under-identified: {0}")]
    Identification(String),

    #[error("degenerate prediction: baseline {baseline}, ad effect {ad_effect}")]
    DegeneratePrediction { baseline: f64, ad_effect: f64 },

    #[error("no positives: {0}")]
    NoPositives(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
