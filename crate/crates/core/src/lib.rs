//! Human-scene network for weakly supervised video anomaly scoring.
//!
//! Everything runs on pre-extracted feature maps: a scene branch models a
//! multi-granularity temporal pyramid, a human branch models the most salient
//! tracklets, and a soft-selection coupler blends their per-segment scores.
//! Training uses a self-rectifying multiple-instance loss.

pub mod checkpoint;
pub mod config;
pub mod coupler;
pub mod data;
pub mod diffkernel;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod human;
pub mod loss;
pub mod model;
pub mod params;
pub mod scene;
pub mod train;

#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
