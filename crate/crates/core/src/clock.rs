//! Injectable clocks.
//!
//! Components read time through [`Clock`] so the same code runs against a
//! virtual clock (whole scenarios in milliseconds, bit-reproducible) or the
//! wall clock (latency measurement).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

pub trait Clock: Send + Sync {
    /// Microseconds since the clock's origin.
    fn now_micros(&self) -> u64;

    fn elapsed_ms_since(&self, start_us: u64) -> f64 {
        self.now_micros().saturating_sub(start_us) as f64 / 1000.0
    }
}

/// Simulation clock. Time only moves when the owner advances it, so any
/// duration measured across pure computation reads as zero.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now_us: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(us: u64) -> Self {
        Self {
            now_us: Arc::new(AtomicU64::new(us)),
        }
    }

    /// Moves the clock forward; earlier targets are ignored.
    pub fn advance_to(&self, us: u64) {
        self.now_us.fetch_max(us, Ordering::SeqCst);
    }

    pub fn advance_by(&self, delta_us: u64) {
        self.now_us.fetch_add(delta_us, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_micros(&self) -> u64 {
        self.now_us.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_micros(&self) -> u64 {
        self.origin.elapsed().as_micros() as u64
    }
}
