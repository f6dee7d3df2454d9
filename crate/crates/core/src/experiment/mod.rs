//! Experiment runner behind the `sbridge-dimf` binary.

pub mod benchmark;
pub mod config;
pub mod output;
pub mod runs;

pub use config::{ExperimentConfig, Mode, Overrides, ResolvedConfig};
pub use runs::{run, Outcome};
