//! Differentiable operations. Each submodule adds forward methods to
//! [`Graph`](crate::Graph) and provides the matching backward kernels.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod shape;
