//! Config-driven experiment runner for the `symbridge` library.

pub mod config;
pub mod experiments;
pub mod report;
pub mod runner;
pub mod suite;

pub use config::{load_config, parse_config, ConfigError, Experiment, ExperimentConfig, Tolerances};
pub use report::{Artifacts, Check, RunReport};
pub use runner::{output_dir, run_experiment, run_suite};
