//! Multispectral CT simulation, denoising baselines, reconstruction and metrics.

pub mod classical;
pub mod detector;
pub mod error;
pub mod materials;
pub mod metrics;
pub mod numeric;
pub mod optics;
pub mod phantom;
pub mod recon;
pub mod stack;

pub use error::{Error, ErrorClass, Result};
