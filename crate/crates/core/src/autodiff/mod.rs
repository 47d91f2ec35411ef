//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live on a [`Tape`]; every operation appends a node holding its
//! output and enough information to push gradients back to its inputs.
//! Because nodes can only reference earlier nodes, the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
