//! Experiment driver for the recommender pipeline.
//!
//! The library half hosts configuration parsing and the staged pipeline so
//! integration tests can call stages directly; the `cllmr` binary wires the
//! same functions to a command line.

pub mod config;
pub mod pipeline;

pub use config::{parse_config, ConfigError, ExperimentConfig};
