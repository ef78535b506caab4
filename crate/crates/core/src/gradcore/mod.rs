//! Minimal reverse-mode differentiation over the primitive set needed by the
//! variational cost, the prior network and the recurrent solver.
//!
//! Arithmetic is 64-bit throughout; [`crate::fields`] converts at the boundary.

mod check;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use check::{analytic_gradient, eval_scalar, grad_check, max_relative_error, numeric_gradient};
pub use params::{normal_tensor, BoundParams, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Shape, Tensor};
