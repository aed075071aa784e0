//! Config-driven pipeline: simulate, train, denoise, reconstruct,
//! average-reference and evaluate. Commands share state only through files
//! in the output directory, each of which gets a manifest entry.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{Candidate, Layout, Method, Pipeline};
pub use config::PipelineConfig;
pub use error::{CliError, Result};
