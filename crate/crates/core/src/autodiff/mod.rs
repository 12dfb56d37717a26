//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Only the primitives the adaptation stack needs are provided. A [`Tape`]
//! records every op applied to [`Var`] handles; [`Tape::backward`] sweeps the
//! record in reverse and returns [`Gradients`] for every recorded value.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_grad, max_relative_error};
pub use ops::{argmax, broadcast_shapes, sigmoid, top_indices, MIN_NORM};
pub use tape::{norm as l2_norm, Gradients, Tape, UnaryKind, Var};
pub use tensor::Tensor;
