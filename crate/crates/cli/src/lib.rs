//! Command-line front end: configuration, experiment commands and artifacts.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod selftest;

pub use artifacts::{write_round_csv, write_summary, Comparison, RunArtifact};
pub use config::parse_config;
