//! Experiment harness around `dcl_core`: config files, presets and the
//! subcommands behind the `dcl` binary.

pub mod commands;
pub mod config;
pub mod presets;
pub mod svg;
