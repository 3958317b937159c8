//! Library side of the `atss` binary: configuration, checkpoints and the
//! subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use commands::{run, Cli, Command, Failure};
pub use config::Config;
