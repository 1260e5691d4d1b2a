//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated and is consumed by a
//! single [`Graph::backward`] call. Trainable weights live in a [`ParamStore`]
//! and are bound into a graph with [`Graph::param`].

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{
    check_against_differences, gradient_check, gradient_check_params, relative_error,
};
pub use graph::{Binary, Gradients, Graph, Reduce, Unary, Var, LOG_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
