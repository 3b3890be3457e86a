//! Command-line front end: run configuration, file formats and commands.

pub mod commands;
pub mod config;
pub mod io;
