//! Error type shared by every core module.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Shape disagreement in a tensor primitive. Names the primitive and
    /// carries a rendering of the offending shapes.
    Dimension { op: &'static str, detail: String },
    /// Input outside a primitive's mathematical domain (log of a non-positive
    /// value, acos outside [-1, 1], a zero-norm row fed to normalization, ...).
    Domain { op: &'static str, detail: String },
    /// Caller broke an API contract: non-scalar backward root, gradient slot
    /// missing, optimizer state out of sync with the parameter store.
    Contract(String),
    /// A configuration value is out of its documented range.
    Config(String),
    /// Malformed user-facing input (empty sequences, label out of range, ...).
    Input(String),
    /// The CTC target cannot be aligned: `frames` time steps cannot emit a
    /// transcript that needs at least `required` steps.
    Infeasible {
        frames: usize,
        labels: usize,
        required: usize,
    },
    /// A brute-force enumeration was asked to cover too large a space.
    TooLarge(String),
    /// A value that must be finite came out NaN or infinite.
    NonFinite { context: String },
    /// A probe evaluation inside the finite-difference checker failed.
    Eval(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dimension { op, detail } => {
                write!(f, "{op}: dimension mismatch: {detail}")
            }
            CoreError::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::Input(msg) => write!(f, "invalid input: {msg}"),
            CoreError::Infeasible {
                frames,
                labels,
                required,
            } => write!(
                f,
                "ctc target infeasible: {frames} output frames cannot emit {labels} labels \
                 (needs at least {required} frames including repeat separators)"
            ),
            CoreError::TooLarge(msg) => write!(f, "enumeration too large: {msg}"),
            CoreError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            CoreError::Eval(msg) => write!(f, "probe evaluation failed: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
