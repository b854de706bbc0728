use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} does not hold {len} elements")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("label {label} at row {row} is outside 0..{classes}")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("class weights must be positive and finite, got {0:?}")]
    InvalidWeights(Vec<f64>),
    #[error("adam: parameter {index} has {params} elements but gradient has {grads}")]
    AdamShape {
        index: usize,
        params: usize,
        grads: usize,
    },
}
