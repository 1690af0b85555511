//! Dense-tensor reverse-mode automatic differentiation.

mod graph;
pub mod kernels;

pub use graph::{BinaryOp, Graph, Var};
