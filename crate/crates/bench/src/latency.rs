//! Per-report latency records and transfer-time class evaluation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Timing of one delivered report, all in milliseconds. `network_ms` is the
/// measured round trip minus the service-side components, so the components
/// always add up to `total_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub vo_id: String,
    pub ts_s: f64,
    pub rr: u32,
    pub wan_one_way_ms: f64,
    pub network_ms: f64,
    pub queue_ms: f64,
    pub solve_ms: f64,
    pub persist_ms: f64,
    pub total_ms: f64,
}

impl LatencyRecord {
    /// Builds a record from the round trip observed by the VO and the
    /// service-side breakdown returned with the ack.
    pub fn from_round_trip(vo_id: &str, ts_s: f64, rr: u32, wan_one_way_ms: f64, rtt_ms: f64, service: [f64; 3]) -> Self {
        let [queue_ms, solve_ms, persist_ms] = service;
        Self {
            vo_id: vo_id.to_string(),
            ts_s,
            rr,
            wan_one_way_ms,
            network_ms: (rtt_ms - queue_ms - solve_ms - persist_ms).max(0.0),
            queue_ms,
            solve_ms,
            persist_ms,
            total_ms: rtt_ms.max(queue_ms + solve_ms + persist_ms),
        }
    }

    /// Estimation plus persistence time.
    pub fn compute_ms(&self) -> f64 {
        self.solve_ms + self.persist_ms
    }
}

pub fn write_latency_csv<W: Write>(rows: &[LatencyRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "vo_id",
            "ts_s",
            "rr",
            "wan_one_way_ms",
            "network_ms",
            "queue_ms",
            "solve_ms",
            "persist_ms",
            "total_ms",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_latency_csv<R: Read>(input: R) -> csv::Result<Vec<LatencyRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no latency records to evaluate")]
pub struct EmptyLatencySet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtClass {
    pub name: String,
    /// `None` means no finite bound.
    pub threshold_ms: Option<f64>,
    /// Percentage of reports with total delay at or under the threshold.
    pub dependability_pct: f64,
    pub average_delay_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub rr: u32,
    pub reports: usize,
    pub average_delay_ms: f64,
    pub tt1_pct: f64,
    pub tt2_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtClassReport {
    pub reports: usize,
    pub classes: Vec<TtClass>,
    /// The same evaluation split by the reporting rate at send time.
    pub by_rate: Vec<RateRow>,
}

impl TtClassReport {
    pub fn class(&self, name: &str) -> Option<&TtClass> {
        self.classes.iter().find(|c| c.name == name)
    }
}

pub const TT1_MS: f64 = 1000.0;
pub const TT2_MS: f64 = 500.0;

fn dependability(totals: &[f64], threshold: Option<f64>) -> f64 {
    match threshold {
        None => 100.0,
        Some(t) => 100.0 * totals.iter().filter(|&&d| d <= t).count() as f64 / totals.len() as f64,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate_tt_classes(latencies: &[LatencyRecord]) -> Result<TtClassReport, EmptyLatencySet> {
    if latencies.is_empty() {
        return Err(EmptyLatencySet);
    }
    let totals: Vec<f64> = latencies.iter().map(|l| l.total_ms).collect();
    let avg = mean(&totals);
    let classes = [("TT0", None), ("TT1", Some(TT1_MS)), ("TT2", Some(TT2_MS))]
        .into_iter()
        .map(|(name, threshold_ms)| TtClass {
            name: name.into(),
            threshold_ms,
            dependability_pct: dependability(&totals, threshold_ms),
            average_delay_ms: avg,
        })
        .collect();
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for l in latencies {
        groups.entry(l.rr).or_default().push(l.total_ms);
    }
    let by_rate = groups
        .into_iter()
        .map(|(rr, t)| RateRow {
            rr,
            reports: t.len(),
            average_delay_ms: mean(&t),
            tt1_pct: dependability(&t, Some(TT1_MS)),
            tt2_pct: dependability(&t, Some(TT2_MS)),
        })
        .collect();
    Ok(TtClassReport {
        reports: latencies.len(),
        classes,
        by_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(total: f64) -> LatencyRecord {
        LatencyRecord::from_round_trip("vo31", 0.0, 50, 40.0, total, [0.0, 1.0, 0.5])
    }

    #[test]
    fn all_fast_reports_meet_both_classes() {
        let r = evaluate_tt_classes(&(0..50).map(|k| rec(80.0 + 6.0 * k as f64)).collect::<Vec<_>>()).unwrap();
        assert_eq!(r.class("TT1").unwrap().dependability_pct, 100.0);
        assert_eq!(r.class("TT2").unwrap().dependability_pct, 100.0);
        assert_eq!(r.class("TT0").unwrap().threshold_ms, None);
    }

    #[test]
    fn one_slow_report_in_a_hundred() {
        let mut v: Vec<_> = (0..99).map(|_| rec(300.0)).collect();
        v.push(rec(1200.0));
        let r = evaluate_tt_classes(&v).unwrap();
        assert_eq!(r.class("TT1").unwrap().dependability_pct, 99.0);
        assert_eq!(r.class("TT2").unwrap().dependability_pct, 99.0);
        assert!((r.class("TT2").unwrap().average_delay_ms - 309.0).abs() < 1e-9);
        assert_eq!(r.by_rate.len(), 1);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert_eq!(evaluate_tt_classes(&[]), Err(EmptyLatencySet));
    }

    #[test]
    fn components_add_up() {
        let r = rec(85.0);
        assert!((r.network_ms + r.queue_ms + r.solve_ms + r.persist_ms - r.total_ms).abs() < 1e-12);
        let mut out = Vec::new();
        write_latency_csv(std::slice::from_ref(&r), &mut out).unwrap();
        assert_eq!(read_latency_csv(&out[..]).unwrap(), vec![r]);
    }
}
