//! Batch entry points of the pick-and-place lab: dataset generation,
//! training, evaluation, hyperparameter analysis and the teaching service.

pub mod args;
pub mod commands;
pub mod error;
pub mod run_config;

pub use error::{CliError, Result};
pub use run_config::{RunConfig, RUN_CONFIG};
