use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Every validation problem found in a configuration, not just the first.
    #[error("invalid configuration ({} problem(s)):\n  {}", .0.len(), .0.join("\n  "))]
    Config(Vec<String>),

    #[error("non-finite {what} at step {step}, particle {particle}")]
    NonFinite {
        step: u64,
        particle: usize,
        what: &'static str,
    },

    #[error("singular evaluation: {0}")]
    Singular(String),

    #[error("invalid diffusion matrix: {0}")]
    InvalidDiffusion(String),

    #[error("time step {dt} exceeds the stability limit {limit}")]
    Stability { dt: f64, limit: f64 },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Singular(_) | Error::InvalidDiffusion(_)
        )
    }
}
