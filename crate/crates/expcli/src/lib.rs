//! Experiment runner and command-line front end for outage detection and
//! localization.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod runner;

pub use config::Config;
pub use error::{CliError, Result};
