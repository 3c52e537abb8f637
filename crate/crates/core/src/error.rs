use thiserror::Error;

use crate::bench::Trial;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical parameter is outside its admissible domain.
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("driveline calibration failed: {0}")]
    Calibration(String),

    /// The nominal model cannot produce the requested quantity
    /// (singular torque balance, dependent actuators, ...).
    #[error("model error: {0}")]
    Model(String),

    #[error("LQR synthesis failed: {0}")]
    Synthesis(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("covariance factorization failed (output {dim}, jitter up to {jitter:e})")]
    Factorization { dim: usize, jitter: f64 },

    #[error("GP hyperparameter training failed for output {dim}: {reason}")]
    Training { dim: usize, reason: String },

    /// The bench state left the finite domain; `partial` holds the trace up to
    /// the offending step.
    #[error("trial aborted at step {step}: non-finite state")]
    TrialAborted { step: usize, partial: Box<Trial> },

    #[error("non-finite cost when perturbing parameter {param}")]
    Gradient { param: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for this error: 2 for configuration and parse
    /// problems, 1 for everything that failed at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
