use thiserror::Error;

/// Errors produced anywhere in the label-shift pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("negative entry {value} at row {row}, column {col}")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("row {row} sums to {sum}, outside tolerance {tol}")]
    RowSumViolation { row: usize, sum: f64, tol: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("class {class} has no source observations")]
    EmptyClass { class: usize },

    #[error("label {label} outside 1..={k}")]
    LabelRange { label: i64, k: usize },

    #[error("Dirichlet concentration must be positive, got {0}")]
    InvalidAlpha(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("class index {index} out of range for k = {k}")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("target mass on class {class} but the pool has no samples of it")]
    UnsupportedClass { class: usize },

    #[error("all class log-densities are -inf")]
    NumericalUnderflow,

    #[error("matrix is singular (reciprocal condition {rcond:e})")]
    SingularMatrix { rcond: f64 },

    #[error("moment-matching system is singular (reciprocal condition {rcond:e})")]
    SingularSystem { rcond: f64 },

    #[error("fixed-point iteration matrix is singular at iteration {iteration}")]
    SingularIterationMatrix { iteration: usize },

    #[error("sandwich Jacobian is singular (reciprocal condition {rcond:e})")]
    SingularJacobian { rcond: f64 },

    #[error("source proportion of class {class} is zero")]
    ZeroSourceProp { class: usize },

    #[error("source proportion of the reference class is zero")]
    ZeroReferenceProp,

    #[error("h_ELSA denominator is degenerate ({0:e})")]
    DegenerateDenominator(f64),

    #[error("domain flag r = 1 requires a label")]
    MissingLabel,

    #[error("all weighted mass is on zero-probability classes")]
    ZeroMass,

    #[error("failed to converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("parse error at line {line}: {cause}")]
    ParseError { line: usize, cause: String },

    #[error("table has both p_ and z_ columns")]
    MixedSchema,

    #[error("stored aggregates disagree with the rows: {0}")]
    AggregateMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
