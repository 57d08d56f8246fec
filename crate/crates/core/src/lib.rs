//! Text-guided radiance field stylization.
//!
//! A scene is first reconstructed from posed images into a density/radiance
//! field, then fine-tuned so that its renders move toward a text prompt in a
//! joint image/text embedding space while a perceptual term holds the content
//! and a weight regularizer keeps the density compact.

pub mod autodiff;
pub mod bridge;
pub mod config;
pub mod embedding;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image_io;
pub mod losses;
pub mod meshing;
pub mod renderer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
