//! File formats, configuration and the command-line pipeline around
//! `explainer-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod pipeline;
pub mod plots;

pub use config::ExperimentConfig;
pub use error::{AppError, Result};
