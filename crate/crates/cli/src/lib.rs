//! Experiment runner for Whittle-index AoI scheduling: config parsing,
//! experiment execution, result tables, policy comparisons and plots.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod table;

pub use config::{ExperimentConfig, ExperimentKind, OutputFormat};
pub use error::{CliError, ConfigError};
pub use experiment::{execute, run_experiment, RunOptions, RunSummary};
