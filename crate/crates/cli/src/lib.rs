//! Command-line front end: file formats and the subcommands.

pub mod commands;
pub mod error;
pub mod io;

pub use commands::{run, Cli, Command};
pub use error::{CliError, CliResult};
