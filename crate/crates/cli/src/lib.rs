//! Library half of the CLI: run configuration, command implementations and
//! the SVG plotter. The binary in `main.rs` only parses arguments and maps
//! errors to exit codes.

pub mod commands;
pub mod plot;
pub mod run_config;
