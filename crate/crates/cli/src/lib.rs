//! Command implementations and file formats behind the `bcrisk` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{CliError, CliResult};
