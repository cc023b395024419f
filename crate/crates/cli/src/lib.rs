//! Configuration-driven experiments over `mimo-core`.
//!
//! Every subcommand reads one JSON [`config::ExperimentConfig`] and writes its
//! results, plus a `<command>.manifest.json` inventory, into one output
//! directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::ExperimentConfig;
pub use error::CliError;
