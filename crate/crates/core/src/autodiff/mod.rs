//! Dense f64 tensors with define-by-run reverse-mode differentiation.

pub mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use sparse::{SparseMap, SparseMapBuilder};
pub use tape::{logsumexp_slice, softmax_slice, CustomOp, Gradients, Tape, Var};
pub(crate) use tape::stable_softplus;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
