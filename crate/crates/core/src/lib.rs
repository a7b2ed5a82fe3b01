//! Dual-pyramid semantic image synthesis at desk scale.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod rng;
pub mod scene_data;
pub mod trainer;

pub use error::{Error, Result};
