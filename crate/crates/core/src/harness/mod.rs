//! Experiment configuration, registry, and report writing.

pub mod config;
pub mod experiments;
pub mod reports;

pub use config::{ConfigError, ExperimentConfig, Resolved, EXPERIMENT_NAMES};
pub use experiments::{experiment_names, run_experiment, HarnessError};
pub use reports::RunOutputs;
