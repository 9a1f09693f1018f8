//! Byte and frame accounting per link and source.

use std::collections::BTreeMap;
use std::io::Write;

use gridmesh_core::time::GpsTimestamp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    PmuToVo,
    VoToCloud,
}

impl Link {
    pub fn as_str(self) -> &'static str {
        match self {
            Link::PmuToVo => "pmu-vo",
            Link::VoToCloud => "vo-cloud",
        }
    }
}

/// Where per-frame sizes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeSource {
    /// The encoded size of each frame or report.
    Measured,
    /// A constant per frame, for comparison with published figures.
    Fixed(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("timestamp {ts} is outside the run window [{start}, {end})")]
    OutsideWindow {
        ts: GpsTimestamp,
        start: GpsTimestamp,
        end: GpsTimestamp,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub frames: u64,
    pub bytes: u64,
}

impl std::ops::AddAssign for Bucket {
    fn add_assign(&mut self, o: Bucket) {
        self.frames += o.frames;
        self.bytes += o.bytes;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub total: Bucket,
    /// Keyed by whole seconds since the run start.
    pub per_second: BTreeMap<u64, Bucket>,
}

/// Serialized accounting sink for every link of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadLedger {
    size: SizeSource,
    start_us: u64,
    end_us: u64,
    links: BTreeMap<(Link, String), LinkCounters>,
}

impl LoadLedger {
    /// A ledger for the window `[start, start + duration)`.
    pub fn new(size: SizeSource, start: GpsTimestamp, duration_us: u64) -> Self {
        Self {
            size,
            start_us: start.as_micros(),
            end_us: start.as_micros() + duration_us,
            links: BTreeMap::new(),
        }
    }

    pub fn size_source(&self) -> SizeSource {
        self.size
    }

    /// The fixed per-frame size, when one is configured.
    pub fn fixed_size(&self) -> Option<u64> {
        match self.size {
            SizeSource::Fixed(b) => Some(b),
            SizeSource::Measured => None,
        }
    }

    pub fn duration_s(&self) -> f64 {
        (self.end_us - self.start_us) as f64 / 1e6
    }

    /// Accounts one frame of `measured_bytes` (replaced by the fixed size
    /// when configured) sent by `source` at `ts`.
    pub fn account(&mut self, link: Link, source: &str, measured_bytes: u64, ts: GpsTimestamp) -> Result<(), LedgerError> {
        let us = ts.as_micros();
        if us < self.start_us || us >= self.end_us {
            return Err(LedgerError::OutsideWindow {
                ts,
                start: GpsTimestamp::from_micros(self.start_us),
                end: GpsTimestamp::from_micros(self.end_us),
            });
        }
        let bytes = self.fixed_size().unwrap_or(measured_bytes);
        let entry = self.links.entry((link, source.to_string())).or_default();
        let b = Bucket { frames: 1, bytes };
        entry.total += b;
        *entry.per_second.entry((us - self.start_us) / 1_000_000).or_default() += b;
        Ok(())
    }

    pub fn counters(&self, link: Link, source: &str) -> Option<&LinkCounters> {
        self.links.get(&(link, source.to_string()))
    }

    pub fn sources(&self, link: Link) -> Vec<&str> {
        self.links.keys().filter(|(l, _)| *l == link).map(|(_, s)| s.as_str()).collect()
    }

    /// Totals over all sources of a link.
    pub fn total(&self, link: Link) -> Bucket {
        let mut t = Bucket::default();
        for ((l, _), c) in &self.links {
            if *l == link {
                t += c.total;
            }
        }
        t
    }

    /// Average frames per second per source on a link over the window.
    pub fn average_rate_per_source(&self, link: Link, sources: usize) -> f64 {
        if sources == 0 {
            return 0.0;
        }
        self.total(link).frames as f64 / sources as f64 / self.duration_s()
    }

    /// `link,source,second,frames,bytes`, one row per non-empty bucket.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["link", "source", "second", "frames", "bytes"])?;
        for ((link, source), c) in &self.links {
            for (sec, b) in &c.per_second {
                w.write_record([
                    link.as_str(),
                    source,
                    &sec.to_string(),
                    &b.frames.to_string(),
                    &b.bytes.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
