//! Convolutional denoisers for spectral sinogram lines, built on a small
//! reverse-mode tape with verified gradients.

pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod params;
pub mod patchcraft;
pub mod tape;
pub mod train;

pub use error::{NeuralError, Result};
