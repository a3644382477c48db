//! Dense `f32` tensors and a single-use tape for reverse-mode gradients.
//!
//! Values are computed eagerly as operations are recorded. Parameters enter
//! the tape as leaves; after [`Tape::backward`] their gradients are read back
//! with [`Gradients::get`] or accumulated straight into the owning tensors via
//! [`accumulate`].

mod kernels;
mod tape;
mod tensor;

pub use tape::{BinaryOp, Gradients, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Adds the gradients of `grads` into each `(leaf, tensor)` pair. Tensors
/// keep whatever they had accumulated before.
pub fn accumulate(grads: &Gradients, leaves: &mut [(Var, &mut Tensor)]) -> Result<()> {
    for (v, t) in leaves.iter_mut() {
        if let Some(g) = grads.get(*v) {
            t.accumulate_grad(g)?;
        }
    }
    Ok(())
}
