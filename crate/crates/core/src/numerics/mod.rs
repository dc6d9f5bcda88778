//! Dense tensors and a small reverse-mode autodiff tape covering every op
//! the Unet forward pass uses.

mod graph;
pub mod io;
mod kernels;
mod tensor;

pub use graph::{Graph, LossKind, Var, DICE_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
