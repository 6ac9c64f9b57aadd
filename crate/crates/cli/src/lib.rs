//! Command-line driver: synthetic data generation, training and model
//! comparison.

pub mod commands;
pub mod config;
pub mod error;

pub use error::CliError;
