use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration diverged at step {step} (t = {t})")]
    Diverged { step: usize, t: f64 },

    #[error("sweep aborted at eps = {eps}, path {path}: {source}")]
    SweepAborted {
        eps: f64,
        path: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("mixing probe failed: {0}")]
    MixingProbeFailed(String),

    #[error("source rejected: centering check failed at t = {t} (|z| = {z:.3})")]
    RejectedSource { t: f64, z: f64 },

    #[error("homogenization failure: minimum eigenvalue {min_eigenvalue:e} below tolerance -{tolerance:e}")]
    HomogenizationFailure { min_eigenvalue: f64, tolerance: f64 },

    #[error("coupling error: {0}")]
    Coupling(String),

    #[error("rate fit needs at least 3 uncensored points, got {0}")]
    TooFewPoints(usize),

    #[error("particle cloud is empty")]
    EmptyCloud,

    #[error("missing averaged coefficients: {0}")]
    MissingCoefficients(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
