//! Configuration, weight files, metrics output and the commands behind the
//! `msa` binary.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod weights;

pub use commands::{CliError, CliResult};
pub use config::RunConfig;
