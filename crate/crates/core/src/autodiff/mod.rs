//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built once with shape inference, then evaluated any number
//! of times against different [`Bindings`]. Evaluation is a pure function
//! of the graph and its inputs, so a graph can be shared across threads.

mod exec;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use exec::{Bindings, Evaluation, Gradients};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use graph::{Graph, NodeId, ARCCOS_EPS};
pub use tensor::Tensor;
