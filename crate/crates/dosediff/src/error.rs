//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands with incompatible shapes reached a primitive.
    #[error("{op}: shape mismatch: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand violated a primitive's shape contract.
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// A primitive produced NaN or Inf.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward; rerun the forward pass")]
    TapeConsumed,

    #[error("grad_check: non-finite loss while perturbing parameter {param}, element {index}")]
    GradCheckNonFinite { param: usize, index: usize },

    #[error("discretize: delta must be strictly positive, got {value} at index {index}")]
    NonPositiveDelta { index: usize, value: f64 },

    #[error("convolution kernel requires token-constant parameters; use the recurrence scan for token-varying ones")]
    TokenVaryingKernel,

    #[error("time step {t} out of range [0, {limit})")]
    TimeStepOutOfRange { t: usize, limit: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("{what}: mask is empty")]
    EmptyMask { what: &'static str },

    #[error("homogeneity index undefined: median dose over the target is 0")]
    UndefinedHomogeneity,

    #[error("phantom generation failed after {attempts} attempts: {reason}")]
    DegenerateGeometry { attempts: usize, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
}
