//! Command-line driver for the surrogate-assisted debiased estimator.

pub mod commands;
pub mod config;

pub use config::{Config, UsageError};
