//! Conditional 3D scene diffusion at desk scale.
//!
//! Objects are described by a 7-DoF pose and a Gaussian-scaffold shape code.
//! Three denoisers (pose, scaffold, latent) are trained jointly on procedurally
//! generated depth scenes and sampled with DDIM under classifier-free guidance.

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod condition;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod knn;
pub mod marching_cubes;
pub mod mesh;
pub mod model;
pub mod occupancy;
pub mod pose;
pub mod scenes;
pub mod shape;
pub mod train;

pub use error::{CoreError, Result};
