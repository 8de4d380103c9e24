//! Simulation toolkit for distributed stochastic gradient tracking.
//!
//! The crate is split along the data flow of an experiment:
//!
//! - [`network`]: agent graphs, mixing matrices and their spectral quantities.
//! - [`oracle`]: local objectives with stochastic first-order oracles.
//! - [`engine`]: DSGT, GSGT, DSG and CSG as seeded state machines.
//! - [`theory`]: closed-form stepsize limits, contraction matrices and bounds.
//! - [`metrics`]: per-iteration error functionals and ensemble statistics.
//! - [`harness`]: configuration files, experiment orchestration and the CLI.

pub mod engine;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod theory;

pub use engine::{AlgorithmKind, AlgorithmState, StepsizePolicy};
pub use metrics::{EnsembleSummary, MetricRow, TrajectoryMetrics};
pub use network::{Graph, MixingKind, MixingMatrix, Topology};
pub use oracle::Problem;
pub use theory::{TheoryInputs, TheoryReport};
