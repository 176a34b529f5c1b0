//! Command-line driver: run configs, verbs and their artifacts.

pub mod commands;
pub mod config;
pub mod output;

pub use config::RunConfig;
