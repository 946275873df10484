//! Experiment harness: configuration, metrics files, and the CLI driver.

pub mod cli;
pub mod config;
pub mod metrics;
