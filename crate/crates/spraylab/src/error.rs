//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("unknown identifier `{name}` at byte {position}")]
    UnknownIdentifier { name: String, position: usize },

    #[error("variable `{name}` out of range for dimension {dimension}")]
    VariableOutOfRange { name: String, dimension: usize },

    #[error("domain error: {function} of non-positive value {value}")]
    Domain { function: &'static str, value: f64 },

    #[error("division by zero")]
    DivisionByZero,

    #[error("jet order {requested} exceeds supported maximum {max}")]
    JetOrder { requested: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("point off the slit bundle: |y| = {norm:e} below epsilon {eps:e}")]
    SlitBundle { norm: f64, eps: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("projective factor fails homogeneity: residual {residual:e}")]
    FactorHomogeneity { residual: f64 },

    #[error("multiplier kernel premise failed: |h y| = {residual:e}")]
    KernelPremise { residual: f64 },

    #[error("1-form h_ij dy^j not closed: residual {residual:e} (stage: {stage})")]
    NotClosed { residual: f64, stage: &'static str },

    #[error("2-form chi depends on the fibre: residual {residual:e} (stage: rapcsak-correct)")]
    ChiFibreDependent { residual: f64 },

    #[error("2-form chi not closed: residual {residual:e} (stage: rapcsak-correct)")]
    ChiNotClosed { residual: f64 },

    #[error("step size underflow at t = {t}: solution blow-up or excessive stiffness")]
    StepUnderflow { t: f64 },

    #[error("fibre norm collapsed below {eps:e} at t = {t}")]
    FibreCollapse { t: f64, eps: f64 },

    #[error("shooting failed to converge after {iterations} iterations (|residual| = {residual:e})")]
    ShootingDiverged { iterations: usize, residual: f64 },

    #[error("singular shooting Jacobian")]
    SingularJacobian,

    #[error("unknown catalog entry `{0}`")]
    UnknownCatalogEntry(String),

    #[error("input format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
