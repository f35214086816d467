//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar sweeps the record in reverse and returns
//! the gradients of all tracked leaves. Layers in [`nn`] keep their weights
//! in a [`ParamStore`] so one set of parameters can be bound to many graphs.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod tns;

pub use error::{Error, Result};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use lstm::LstmState;
pub use ops::conv::Padding;
pub use ops::elementwise::{elu, sigmoid};
pub use ops::norm::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use params::{Bound, Param, ParamId, ParamStore, StatsId};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
