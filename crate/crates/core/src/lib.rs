//! Differentiable B-mode ultrasound rendering and tissue-field training.
//!
//! The crate learns a five-channel tissue description (attenuation,
//! reflectance, border probability, scatter density, scatter amplitude)
//! from posed 2D sweeps, renders synthetic B-mode frames from it along
//! arbitrary poses, and provides a classical voxel-compounding baseline
//! for comparison.

pub mod compound;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod inr;
pub mod loss;
pub mod phantom;
pub mod renderer;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid, ParamMaps};
