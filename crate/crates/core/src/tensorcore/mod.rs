//! Dense tensors with a per-forward-pass reverse-mode gradient tape.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi};
pub use params::{Binder, ParamId, ParamStore};
pub use tape::{precision, set_precision, with_precision, Gradients, Precision, Tape, Var};
pub use tensor::{log_add, log_sum_exp, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(&'static str),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Self::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
