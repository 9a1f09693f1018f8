//! Per-VO measurement buffer and timestamp alignment.
//!
//! Each estimation uses, per VO, the report with the largest timestamp not
//! after the trigger timestamp. A short history is kept per VO so a report
//! that arrives late (after a newer one) still aligns correctly for triggers
//! that precede it.

use std::collections::BTreeMap;

use gridmesh_core::grid::NodeId;
use gridmesh_core::time::GpsTimestamp;
use gridmesh_core::Phasor;

pub const DEFAULT_HORIZON_S: f64 = 2.0;
const DEFAULT_HISTORY: usize = 256;

/// The report chosen for one VO at a trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSource {
    pub vo_id: String,
    pub node: NodeId,
    pub ts: GpsTimestamp,
    pub phasor: Phasor,
    /// Trigger time minus report time (s).
    pub staleness_s: f64,
    /// Staleness exceeds the horizon.
    pub stale: bool,
}

#[derive(Debug, Clone)]
struct VoHistory {
    node: NodeId,
    reports: BTreeMap<GpsTimestamp, Phasor>,
}

#[derive(Debug, Clone)]
pub struct AlignmentBuffer {
    horizon_s: f64,
    history: usize,
    vos: BTreeMap<String, VoHistory>,
}

impl Default for AlignmentBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_HORIZON_S)
    }
}

impl AlignmentBuffer {
    pub fn new(horizon_s: f64) -> Self {
        Self {
            horizon_s,
            history: DEFAULT_HISTORY,
            vos: BTreeMap::new(),
        }
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_s
    }

    /// Records a report. A repeated timestamp replaces the earlier value.
    pub fn insert(&mut self, vo_id: &str, node: NodeId, ts: GpsTimestamp, phasor: Phasor) {
        let h = self.vos.entry(vo_id.to_string()).or_insert_with(|| VoHistory {
            node,
            reports: BTreeMap::new(),
        });
        h.node = node;
        h.reports.insert(ts, phasor);
        while h.reports.len() > self.history {
            h.reports.pop_first();
        }
    }

    /// Most recent report at or before `trigger` for every VO that has one,
    /// ordered by VO id.
    pub fn aligned(&self, trigger: GpsTimestamp) -> Vec<AlignedSource> {
        self.vos
            .iter()
            .filter_map(|(id, h)| {
                let (&ts, &phasor) = h.reports.range(..=trigger).next_back()?;
                let staleness_s = trigger.seconds_since(&ts);
                Some(AlignedSource {
                    vo_id: id.clone(),
                    node: h.node,
                    ts,
                    phasor,
                    staleness_s,
                    stale: staleness_s > self.horizon_s,
                })
            })
            .collect()
    }

    /// Latest report of a VO regardless of any trigger.
    pub fn latest(&self, vo_id: &str) -> Option<(GpsTimestamp, Phasor)> {
        self.vos.get(vo_id)?.reports.last_key_value().map(|(t, p)| (*t, *p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(us: u64) -> GpsTimestamp {
        GpsTimestamp::from_micros(us)
    }

    #[test]
    fn aligned_pair_has_zero_staleness() {
        let mut b = AlignmentBuffer::default();
        b.insert("vo71", 71, ts(20_000_000), Phasor::new(0.95, 0.0));
        b.insert("vo31", 31, ts(20_000_000), Phasor::new(1.01, 0.0));
        let a = b.aligned(ts(20_000_000));
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].vo_id, "vo31");
        assert!(a.iter().all(|s| s.staleness_s == 0.0 && !s.stale));
    }

    #[test]
    fn slower_vo_is_reused_with_staleness() {
        let mut b = AlignmentBuffer::default();
        b.insert("vo71", 71, ts(20_000_000), Phasor::new(0.95, 0.0));
        b.insert("vo31", 31, ts(20_980_000), Phasor::new(1.01, 0.0));
        let a = b.aligned(ts(20_980_000));
        let s71 = a.iter().find(|s| s.vo_id == "vo71").unwrap();
        assert!((s71.staleness_s - 0.98).abs() < 1e-12);
        assert!(!s71.stale);
        let late = b.aligned(ts(23_000_000));
        assert!(late.iter().find(|s| s.vo_id == "vo71").unwrap().stale);
    }

    #[test]
    fn late_arrivals_align_by_timestamp() {
        let mut b = AlignmentBuffer::default();
        b.insert("vo31", 31, ts(2_000_000), Phasor::new(1.2, 0.0));
        b.insert("vo31", 31, ts(1_000_000), Phasor::new(1.1, 0.0));
        let at = |t| b.aligned(ts(t)).first().map(|s| s.ts);
        assert_eq!(at(1_500_000), Some(ts(1_000_000)));
        assert_eq!(at(2_000_000), Some(ts(2_000_000)));
        assert_eq!(at(999_999), None);
        assert_eq!(b.latest("vo31").unwrap().0, ts(2_000_000));
    }

    #[test]
    fn history_is_bounded() {
        let mut b = AlignmentBuffer::default();
        for k in 0..1000 {
            b.insert("vo31", 31, ts(k * 20_000), Phasor::new(1.0, 0.0));
        }
        assert_eq!(b.vos["vo31"].reports.len(), DEFAULT_HISTORY);
    }
}
