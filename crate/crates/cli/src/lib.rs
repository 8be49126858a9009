//! Command-line driver for the vessel segmentation toolkit.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod train;

pub use cli::main_with_args;
pub use config::RunConfig;
pub use error::{CliError, Result};
