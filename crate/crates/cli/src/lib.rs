//! Workflow behind the `lvqa` binary: dataset generation, training,
//! evaluation, comparison across variants and attention export.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{config_keys, config_keys_help, RunConfig};
pub use error::{CliError, CliResult};

/// Environment variable naming the default run root.
pub const RUN_DIR_ENV: &str = "LVQA_RUN_DIR";
