//! Experiment runner for sharpness-aware multi-task optimization.
//!
//! Every subcommand of the `samo` binary is a function in [`commands`];
//! [`output`] holds the file formats and their readers.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
