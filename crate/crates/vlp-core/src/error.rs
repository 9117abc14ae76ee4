use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Library-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Incompatible tensor shapes; carries both offending shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Class/row index out of range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Word not present in the closed vocabulary.
    UnknownWord(String),
    /// Contract violation described in the message.
    Invalid(String),
    /// Non-finite value encountered; names the tensor.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            CoreError::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what}: index {index} out of range (bound {bound})")
            }
            CoreError::UnknownWord(w) => write!(f, "unknown word: {w:?}"),
            CoreError::Invalid(msg) => write!(f, "{msg}"),
            CoreError::NonFinite(name) => write!(f, "non-finite value in {name}"),
        }
    }
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }
}

pub type Result<T> = core::result::Result<T, CoreError>;
