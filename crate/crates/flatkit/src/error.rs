//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by matrix math, quantization, calibration, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or width incompatibility between operands.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An argument outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Numerical failure (non-positive-definite Hessian, divergence, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Calibration loss exploded past the abort threshold.
    #[error("calibration diverged at epoch {epoch}: loss {loss:.6e} exceeds 10x initial {initial:.6e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    /// Parameters registered for training never received a gradient.
    #[error("detached parameters (registered but unreachable from the loss): {0:?}")]
    Detached(Vec<String>),

    /// Malformed or out-of-contract container file.
    #[error("container: {0}")]
    Container(String),

    /// Configuration failed schema validation.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
