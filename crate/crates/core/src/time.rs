use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Ticks per second used on the wire: microsecond resolution covers the
/// 20 ms reporting grid exactly.
pub const TIME_BASE: u32 = 1_000_000;

/// A GPS-synchronised timestamp: whole seconds plus a fraction expressed in
/// `time_base` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GpsTimestamp {
    pub soc: u32,
    pub frac: u32,
    #[serde(default = "default_time_base", skip_serializing_if = "is_default_base")]
    pub time_base: u32,
}

fn default_time_base() -> u32 {
    TIME_BASE
}

fn is_default_base(base: &u32) -> bool {
    *base == TIME_BASE
}

impl GpsTimestamp {
    /// Timestamp on the default microsecond time base.
    ///
    /// Panics if `frac` is not below the time base.
    pub fn new(soc: u32, frac: u32) -> Self {
        assert!(frac < TIME_BASE, "fraction {frac} out of range");
        Self {
            soc,
            frac,
            time_base: TIME_BASE,
        }
    }

    pub fn try_with_base(soc: u32, frac: u32, time_base: u32) -> Option<Self> {
        (time_base > 0 && frac < time_base).then_some(Self {
            soc,
            frac,
            time_base,
        })
    }

    /// Builds a timestamp from microseconds since the epoch.
    ///
    /// Panics if the seconds part does not fit the 32-bit SOC field.
    pub fn from_micros(us: u64) -> Self {
        let soc = u32::try_from(us / TIME_BASE as u64).expect("SOC overflow");
        Self::new(soc, (us % TIME_BASE as u64) as u32)
    }

    /// Microseconds since the epoch, rescaling when the time base differs.
    pub fn as_micros(&self) -> u64 {
        let frac_us = if self.time_base == TIME_BASE {
            self.frac as u64
        } else {
            self.frac as u64 * TIME_BASE as u64 / self.time_base as u64
        };
        self.soc as u64 * TIME_BASE as u64 + frac_us
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.soc as f64 + self.frac as f64 / self.time_base as f64
    }

    pub fn is_valid(&self) -> bool {
        self.time_base > 0 && self.frac < self.time_base
    }

    /// Signed difference `self - earlier` in seconds.
    pub fn seconds_since(&self, earlier: &GpsTimestamp) -> f64 {
        (self.as_micros() as i128 - earlier.as_micros() as i128) as f64 / TIME_BASE as f64
    }
}

impl Ord for GpsTimestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.frac as u64 * other.time_base as u64;
        let rhs = other.frac as u64 * self.time_base as u64;
        self.soc
            .cmp(&other.soc)
            .then(lhs.cmp(&rhs))
            .then(self.time_base.cmp(&other.time_base))
    }
}

impl PartialOrd for GpsTimestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for GpsTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.time_base == TIME_BASE {
            write!(f, "{}.{:06}", self.soc, self.frac)
        } else {
            write!(f, "{}+{}/{}", self.soc, self.frac, self.time_base)
        }
    }
}
