//! Library side of the `ismoe` command line tool.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{AblationMode, GeneratorKind};
pub use config::{parse_overrides, RunConfig};
pub use error::CliError;
