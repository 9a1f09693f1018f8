//! Cloud-side distribution system state estimation.
//!
//! - [`alignment`]: per-VO report history and "most recent at or before the
//!   trigger" selection.
//! - [`engine`]: the per-report estimation pipeline and command rules.
//! - [`store`]: the append-only record log.
//! - [`broker`]: topic publish/subscribe with a TCP line protocol.
//! - [`service`]: HTTP endpoints and the single estimation worker.

pub mod alignment;
pub mod broker;
pub mod config;
pub mod engine;
pub mod registry;
pub mod service;
pub mod store;

pub use config::DsseConfig;
pub use engine::{Ack, DsseCore, EngineConfig, Estimator, IngestError, PseudoSource, Rule, RuleAction};
pub use service::DsseService;
