//! Command-line driver: dataset generation, staged training, evaluation and
//! ablation grids.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use config::RunConfig;
pub use error::{exit_code, CliError};
