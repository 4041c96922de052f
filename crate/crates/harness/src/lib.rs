//! Command-line harness: training, gradient checks, ablations, analysis and cost reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod train;

pub use config::{Overrides, RunConfig};
pub use error::{HarnessError, HarnessResult};
