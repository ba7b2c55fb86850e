use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("softmax temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("prototype for class {0} is unavailable")]
    UnavailableClass(usize),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("probability {value} outside [0, 1] in {op}")]
    ProbabilityRange { op: &'static str, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
