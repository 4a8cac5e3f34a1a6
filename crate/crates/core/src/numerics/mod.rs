//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

pub mod conv;
mod finite_diff;
mod graph;
pub mod special;
mod tensor;

pub use finite_diff::{finite_difference_gradient, gradients_agree};
pub use graph::{primitive_set, CustomOp, Graph, Primitive, Var};
pub use tensor::Tensor;
