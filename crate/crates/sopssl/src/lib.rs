//! File formats, artifacts and the command-line driver around `sopssl-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::{exit, CliError, CliResult};
