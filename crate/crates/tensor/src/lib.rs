//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The [`Tape`] records operations on row-major [`Tensor`]s and back-propagates
//! from a scalar. Parameters live in named [`ParamStore`]s and are updated by
//! [`Adam`]. [`gradcheck`] provides the finite-difference oracle used to test
//! every differentiable operation in 64-bit mode.

pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use kernels::{parallel_enabled, reference_mode, set_reference_mode};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig, Moments, OptimError};
pub use params::{Grads, ParamStore};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
