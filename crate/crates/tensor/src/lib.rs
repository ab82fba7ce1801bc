//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Forward ops are recorded on a [`Tape`]; [`Tape::backward`] replays them in
//! reverse. Parameters live in a [`ParamStore`] and are bound to a tape through
//! a [`Session`]. Training runs in `f32`; gradient checks use `f64`.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use params::{grad_check_params, ParamGrads, ParamId, ParamStore, Session};
pub use real::{lit, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
