//! Differentiable primitives. Each submodule adds forward methods to
//! [`Graph`](crate::Graph) and the matching backward rules.

pub mod conv;
pub(crate) mod elementwise;
pub(crate) mod loss;
pub(crate) mod matmul;
pub(crate) mod norm;
pub(crate) mod shape;
