//! Minimal deterministic reverse-mode automatic differentiation.

mod graph;
pub mod kernels;

pub use graph::{Fault, Gradients, Graph, IouTarget, Var};
pub use kernels::{Axis, ConvGeometry, Padding, Unary};
