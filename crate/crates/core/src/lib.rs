//! Monitored distillation of blind depth ensembles.
//!
//! A set of precomputed teacher depth maps is scored by how well each one
//! reconstructs the target image from adjacent views and how closely it
//! follows the sparse depth measurements. The best teacher per pixel forms a
//! distilled depth map, and a per-pixel monitor decides how much to trust it
//! versus unsupervised photometric and smoothness terms. A dense depth field
//! is then recovered by first-order minimization of the combined objective.

pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod parallel;
pub mod photometric;
pub mod scene;
pub mod solver;
pub mod synthetic;

pub use error::{Error, Result};
