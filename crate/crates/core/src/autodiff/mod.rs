//! Minimal dense reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod linalg;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

/// Epsilon inside the channel standard deviation.
pub const STD_EPS: f64 = 1e-5;
