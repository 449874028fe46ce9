//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod check;
mod graph;
pub mod kernels;
mod tensor;

pub use check::{finite_difference_check, finite_difference_check_sampled, rel_err, FdReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
