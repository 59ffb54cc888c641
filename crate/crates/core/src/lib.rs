pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod nn;

pub use autodiff::{Bindings, Gradients, Graph, NodeId, Tensor};
pub use error::{Error, Result};
