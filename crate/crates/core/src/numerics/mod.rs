//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Reduction, Var};
pub use optim::{AdamWConfig, OptimizerState};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
