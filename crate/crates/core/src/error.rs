use thiserror::Error;

use crate::vehicle::VehicleState;

/// Errors raised across the braking stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate speeds: chassis speed and wheel circumferential speed are both zero")]
    DegenerateSpeed,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("invalid mass configuration: centre of gravity at {lf:.4} m behind the front axle is outside the wheelbase {wheelbase:.4} m")]
    CogOutsideWheelbase { lf: f64, wheelbase: f64 },

    #[error("unsupported driver input: {0}")]
    UnsupportedDriverInput(String),

    #[error("numerical divergence at t = {time:.4} s")]
    Divergence {
        time: f64,
        last_valid: Box<VehicleState>,
    },

    #[error("slip model invalid at chassis speed {speed:.3} m/s (minimum {min:.3} m/s)")]
    ModelInvalid { speed: f64, min: f64 },

    #[error("QP solver failed after {iterations} iterations")]
    SolverFailure { iterations: usize },

    #[error("QP is infeasible: {0}")]
    Infeasible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("undefined signal-to-noise ratio: reference signal has zero power")]
    UndefinedSnr,

    #[error("undefined cost: {0}")]
    UndefinedCost(String),

    #[error("Gaussian process fit failed: {0}")]
    GpFit(String),

    #[error("activation refused: {0}")]
    ActivationRefused(String),

    #[error("compensator fault: non-finite input")]
    CompensatorFault,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
