//! Library side of the `bibit` command-line tool: config parsing, run
//! directories, verification suites and command execution.

pub mod commands;
pub mod config;
pub mod output;
pub mod verify;

pub use commands::{execute, replay, CliError, Invocation, Outcome};
