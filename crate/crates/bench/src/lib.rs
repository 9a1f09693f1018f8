//! Experiment harness: wires scenario, PMU emulators, VOs and the DSSE
//! service together, accounts traffic and latency, and exports the data
//! behind the load, trajectory and latency-class comparisons.

pub mod artifacts;
pub mod experiment;
pub mod latency;
pub mod ledger;
pub mod run;

pub use experiment::{ClockMode, CloudMode, ExperimentConfig, Mode, PseudoMode};
pub use run::{run_experiment, RunResult};
