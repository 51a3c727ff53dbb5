//! Command-line runner for mapping, localization, evaluation and rendering
//! experiments on simulated parking lots.

pub mod commands;
pub mod config;
pub mod error;
pub mod render;
pub mod scenario;

pub use commands::{cmd_eval, cmd_localize, cmd_map, cmd_render, Metrics};
pub use config::RunConfig;
pub use error::CliError;
