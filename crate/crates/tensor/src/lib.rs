//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Tape`] records operations on
//! [`Var`] handles, [`Tape::backward`] returns [`Gradients`] for every
//! differentiable leaf, and [`Var::detach`] cuts a branch out of the
//! gradient graph. Execution is single threaded and every reduction runs in
//! a fixed order, so results are bit-reproducible.

mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("optimizer state mismatch: {0}")]
    StateMismatch(String),
}
