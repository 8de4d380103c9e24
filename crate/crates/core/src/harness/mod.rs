//! Configuration, experiment orchestration and artifact output.

pub mod config;
pub mod experiment;
pub mod suite;

pub use config::{ConfigError, ExperimentConfig, PerAlgorithm, WeightRule};
pub use experiment::{prepare, run_experiment, write_artifacts, ExperimentError, Outcome, Setup, Summary};
pub use suite::{run_fig1, run_sweep, SweepAxis};
