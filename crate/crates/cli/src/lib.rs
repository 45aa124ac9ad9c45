//! Library side of the `fkdv` binary: configuration, output writers and
//! command dispatch.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod output;

pub use commands::{execute, Command, Options, Outcome};
pub use error::CliError;
