//! Edge side of the pipeline: PMU emulators and the Virtual Objects that
//! terminate their streams.
//!
//! [`vo::VirtualObject`] is the transport-free core (decode, rate policy,
//! filtering). [`server::VoRuntime`] wraps it with a TCP ingest socket, an
//! HTTP `GET /latest` endpoint and a northbound POST delivery queue.

pub mod emulator;
pub mod filter;
pub mod policy;
pub mod server;
pub mod vo;
