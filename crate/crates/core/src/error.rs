//! Unified error type. Variants are shared across the whole crate so that
//! library callers and the CLI map failures to exit codes in one place.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFiniteValue { context: String },

    /// Tensor or vector dimensions do not line up for the requested operation.
    #[error("shape error: {context}")]
    ShapeError { context: String },

    /// Finite-difference step must be strictly positive.
    #[error("finite-difference step must be > 0")]
    InvalidStep,

    /// Network layer sizes are unusable (fewer than two dims, or a zero dim).
    #[error("invalid architecture: {reason}")]
    InvalidArchitecture { reason: String },

    /// Serialized payload cannot be decoded.
    #[error("corrupt checkpoint: {reason}")]
    CorruptCheckpoint { reason: String },

    /// Declared dims disagree with the amount of serialized data.
    #[error("dims mismatch: header expects {expected} values, payload has {got}")]
    DimsMismatch { expected: usize, got: usize },

    /// Rollouts need at least one integration step.
    #[error("step count must be >= 1")]
    InvalidSteps,

    /// Dynamics failed the control-affinity probe.
    #[error("dynamics are not affine in the control (residual {residual:.3e})")]
    NotAffineInControl { residual: f64 },

    /// Level-set field has no interior.
    #[error("level-set field is empty (no positive region)")]
    EmptyShape,

    /// Level-set field has no exterior, so no boundary to measure.
    #[error("level-set field is full (no non-positive region)")]
    FullShape,

    /// Rejection sampling gave up.
    #[error("sampling failed after {attempts} rejected draws")]
    SamplingFailed { attempts: u32 },

    /// Training requires a non-empty batch.
    #[error("empty batch")]
    EmptyBatch,

    /// Loss became non-finite during training.
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: u64 },

    /// Phase 2 needs a phase-1 checkpoint.
    #[error("phase 2 requires a phase-1 checkpoint")]
    MissingPhase1,

    /// Checkpoint format version is newer than this build understands.
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u32 },

    /// Checkpoint belongs to a different environment than requested.
    #[error("environment mismatch: expected {expected}, checkpoint has {found}")]
    EnvMismatch { expected: String, found: String },

    /// Structured data violates its schema (config fields, metrics widths).
    #[error("schema error: {reason}")]
    SchemaError { reason: String },

    /// Name not present in the environment registry.
    #[error("unknown environment {name:?} (valid: lq, cartpole, mountaincar, shape)")]
    UnknownEnvironment { name: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>) -> Self {
        Error::ShapeError { context: context.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFiniteValue { context: context.into() }
    }
}
