//! Crate-wide error type. Numerical aborts carry enough context (node,
//! time, offending value) to localize the failure in a run report.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinslerError {
    #[error("F²({context}) = {value:.6e} is not positive")]
    NonPositiveF { value: f64, context: String },

    #[error("fundamental tensor not positive definite ({context}): min eigenvalue {min_eig:.6e}")]
    NotPositiveDefinite { min_eig: f64, context: String },

    #[error("singular matrix while {context}")]
    SingularMetric { context: String },

    #[error("Randers deformation too large: sup ‖b‖_a = {norm:.6} ≥ 1")]
    ConvexityViolated { norm: f64 },

    #[error("grid resolution ({n1}, {n2}, {ntheta}) invalid: {reason}")]
    BadResolution { n1: usize, n2: usize, ntheta: usize, reason: String },

    #[error("homogeneity degree mismatch: {left} vs {right} in {context}")]
    DegreeMismatch { left: i32, right: i32, context: String },

    #[error("blow-up at t = {t:.6e}, node ({i}, {j}, {k}): {reason}")]
    BlowUp { t: f64, i: usize, j: usize, k: usize, reason: String },

    #[error("time step {dt:.3e} violates the CFL bound {bound:.3e} (c ≤ {c_max})")]
    CflViolation { dt: f64, bound: f64, c_max: f64 },

    #[error("diffeomorphism step moved a particle {step:.3e}, more than half a cell ({limit:.3e})")]
    DisplacementTooLarge { step: f64, limit: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FinslerError>;
