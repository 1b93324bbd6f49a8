//! Dense tensors and reverse-mode automatic differentiation.

mod fd;
mod graph;
mod real;
mod tensor;

pub use fd::{finite_difference_gradient, max_relative_error, DEFAULT_EPSILON};
pub use graph::{Bindings, Graph, Values, Var};
pub use real::{gemm, Real};
pub use tensor::Tensor;

/// Layer-norm denominator epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;
