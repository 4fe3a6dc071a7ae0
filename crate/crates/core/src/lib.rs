//! Conditional voxel diffusion for self-supervised shape completion.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geom;
pub mod grid;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
