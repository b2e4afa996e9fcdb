//! Batch front-end: configuration files, commands and SVG output.

pub mod commands;
pub mod config;
pub mod svg;

pub use commands::exit_code;
pub use config::ExperimentConfig;
