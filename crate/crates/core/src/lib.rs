//! Core building blocks for the gridmesh synchrophasor pipeline.
//!
//! - [`wire`]: bit-exact encoder/decoder for the synchrophasor data frames
//!   emitted by the PMU emulators.
//! - [`grid`], [`powerflow`], [`scenario`]: the balanced radial feeder, its
//!   backward/forward sweep solver and the scenario runner that produces the
//!   ground-truth phasor series.
//! - [`wls`]: branch-current weighted-least-squares state estimation with a
//!   constant, factorized-once gain matrix.
//! - [`report`]: the key-value documents exchanged between edge VOs and the
//!   DSSE service.

pub mod clock;
pub mod grid;
pub mod phasor;
pub mod powerflow;
pub mod report;
pub mod scenario;
pub mod time;
pub mod wire;
pub mod wls;

pub use num_complex::Complex64;
pub use phasor::Phasor;
pub use time::GpsTimestamp;
