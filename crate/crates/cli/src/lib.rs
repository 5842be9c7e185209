//! Pipeline driver: configuration, artifact storage and the `poac` commands.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod store;

pub use error::{CliError, Result};
