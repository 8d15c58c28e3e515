//! Camera pose estimation by inverting a differentiable radiance field.
//!
//! Pose hypotheses are refined with Adam running separately on rotation
//! (about the camera origin) and translation, and a pool of hypotheses is
//! periodically resampled around the lowest-loss survivors.

pub mod adam;
pub mod bench;
pub mod camera;
pub mod demo2d;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod image;
pub mod lie;
pub mod loss;
pub mod render;
pub mod rng;
pub mod search;
pub mod train;

pub use error::{Error, Result};
