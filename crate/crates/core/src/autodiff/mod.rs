//! Reverse-mode automatic differentiation, ADAM, and the finite-difference oracle.

mod adam;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_gradient, relative_error};
pub(crate) use graph::softmax_in_place as softmax_row;
pub use graph::{elu, sigmoid, BatchStats, Gradients, Graph, Padding, Var};
pub use params::{ParamStore, Parameter};
