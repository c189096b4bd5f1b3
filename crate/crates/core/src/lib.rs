//! Viewport prediction for 360-degree video: spherical geometry, FoV
//! heatmaps, baseline predictors, neural trajectory and heatmap models, and
//! sliding-window evaluation.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod neural;
pub mod synth;

pub use error::{Error, Result};
