use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by propagation, bound evaluation, control and configuration.
#[derive(Debug, Error)]
pub enum Error {
    /// The integrator could not advance. Carries the last accepted point.
    #[error("propagation failed at t = {t}: {reason}")]
    Propagation {
        t: f64,
        state: Vec<f64>,
        reason: String,
    },

    /// A geometric quantity was evaluated where it is undefined.
    #[error("singular {what} at t = {t}")]
    Singularity { what: &'static str, t: f64 },

    #[error("non-finite quantity at sample {index}: {sample:?}")]
    NonFiniteSample { index: usize, sample: Vec<f64> },

    /// No control in the multi-start budget satisfied the hard constraints.
    #[error("impulse problem infeasible at t = {t}: worst barrier residual {worst_residual:e} (best u = {best_u:?})")]
    Infeasible {
        t: f64,
        best_u: Vec<f64>,
        residuals: Vec<f64>,
        worst_residual: f64,
    },

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema mismatch in {file}: {message}")]
    Schema { file: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
