//! Image ingestion, dataset manifests, run configuration, model persistence
//! and report emission for the `cskn` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod image;
pub mod manifest;
pub mod persist;
pub mod report;
pub mod selftest;
pub mod synth;

pub use error::{CliError, Result};
