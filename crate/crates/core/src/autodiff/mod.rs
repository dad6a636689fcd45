//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Forward ops are methods on [`Tape`]; parameters live in a [`ParamStore`]
//! and are pulled onto the tape with [`Tape::param`]. After
//! [`Tape::backward`], parameter gradients are added to the store with
//! [`Gradients::accumulate_into`].

mod kernels;

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_params, relative_error};
pub use params::{ParamId, ParamStore};
pub use tape::{AsymmetricLossParams, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
