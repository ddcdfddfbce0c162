use thiserror::Error;

/// Errors raised by the simulation and spectroscopy routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("integration diverged with step size {step:e}: {reason}")]
    IntegrationDiverged { step: f64, reason: String },

    #[error("dark/bright modes are undefined when both couplings vanish")]
    DegenerateModes,

    #[error("fidelity is undefined when signal and noise are both zero")]
    UndefinedFidelity,

    #[error("invalid level pair ({m}, {n}): {reason}")]
    InvalidPair { m: usize, n: usize, reason: String },

    #[error("levels {m} and {n} are degenerate (gap {gap_mhz:.4} MHz below tolerance)")]
    DegenerateTransition { m: usize, n: usize, gap_mhz: f64 },

    #[error("spin parameter file: {0}")]
    SpinParams(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
