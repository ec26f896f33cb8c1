//! Diffusion active learning for sparse-view tomography.
//!
//! A pixel-space diffusion prior is trained on structured phantoms, sampled
//! conditionally on the measurements collected so far, and the spread of the
//! samples in measurement space decides which projection angle (or k-space
//! row) to acquire next.

pub mod acquisition;
pub mod archive;
pub mod baselines;
pub mod classic;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod measurement;
pub mod nn;
pub mod metrics;
pub mod objective;
pub mod phantoms;
pub mod posterior;
pub mod rng;

pub use error::{DalError, Result};
pub use image::Image;
