//! Scenario configs, the named experiments and their CSV/JSON reports.

pub mod config;
pub mod error;
pub mod experiments;
pub mod selftest;

pub use config::{ModeTag, Overrides, Scenario};
pub use error::{CliError, CliResult};
