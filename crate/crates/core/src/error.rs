//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a type invariant (non-finite values, bad shape).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor shape does not match what the operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A guidance or metric operation was asked to run with no active
    /// constraint (all mask bits off).
    #[error("empty control: {0}")]
    EmptyControl(String),

    /// No constraint exists at the requested frame.
    #[error("no constraint at frame {frame}: {what}")]
    NoConstraint { frame: usize, what: &'static str },

    /// Pose geometry from which no heading can be extracted.
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    /// A curve specification is self-inconsistent.
    #[error("curve spec error: {0}")]
    CurveSpec(String),

    /// Composed curve segments do not join up.
    #[error("composition error: segment {segment} starts {gap:.6} m away from the previous segment's end")]
    Composition { segment: usize, gap: f64 },

    /// Joint map index outside the raw pose array.
    #[error("joint map error: {0}")]
    JointMap(String),

    /// Training diverged.
    #[error("training failure at step {step}: loss = {loss}")]
    TrainingFailure { step: usize, loss: f64 },

    /// Configuration rejected before execution.
    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse failure class used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::CurveSpec(_) | Error::Composition { .. } => {
                ErrorClass::Config
            }
            Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => ErrorClass::Io,
            _ => ErrorClass::Numeric,
        }
    }
}

/// Failure classes with distinct process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Io => 3,
            ErrorClass::Numeric => 4,
        }
    }
}
