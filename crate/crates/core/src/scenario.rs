//! Scenario scripts and the ground-truth phasor series they produce.
//!
//! A scenario replays the feeder on a fixed sample grid (20 ms by default),
//! solving one power flow per tick with event-adjusted loads. Ticks whose
//! loads equal the previous tick reuse its solution, so the series is stored
//! run-length encoded; a day-long steady scenario costs a handful of solves.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridModel, NodeId};
use crate::phasor::Phasor;
use crate::powerflow::{solve_with_loads, PowerFlowError, SweepOptions};
use crate::time::{GpsTimestamp, TIME_BASE};
use crate::Complex64;

pub const SCENARIO_SCHEMA: &str = "gridmesh.scenario/1";

/// Text of the bundled DER-insertion scenario.
pub const DER_INSERTION_KV: &str = include_str!("../../../data/der-insertion.kv");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("power flow failed at tick {tick}: {source}")]
    Solver {
        tick: u64,
        #[source]
        source: PowerFlowError,
    },
    #[error("malformed scenario document: {0}")]
    Parse(String),
    #[error("malformed truth CSV: {0}")]
    Csv(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// A change in a node's complex demand. Generation is a negative delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadEvent {
    pub time_s: f64,
    pub node: NodeId,
    pub p: f64,
    pub q: f64,
    /// Linear ramp length; zero is a step.
    #[serde(default)]
    pub ramp_s: f64,
}

impl LoadEvent {
    pub fn delta(&self) -> Complex64 {
        Complex64::new(self.p, self.q)
    }

    fn time_us(&self) -> u64 {
        secs_to_micros(self.time_s)
    }

    fn ramp_us(&self) -> u64 {
        secs_to_micros(self.ramp_s)
    }

    /// Fraction of the delta applied at `t_us`.
    fn weight_at(&self, t_us: u64) -> f64 {
        let start = self.time_us();
        if t_us < start {
            return 0.0;
        }
        let ramp = self.ramp_us();
        if ramp == 0 {
            1.0
        } else {
            ((t_us - start) as f64 / ramp as f64).min(1.0)
        }
    }
}

fn secs_to_micros(s: f64) -> u64 {
    (s * TIME_BASE as f64).round() as u64
}

fn default_period() -> f64 {
    0.02
}
fn default_frequency() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub schema: String,
    pub duration_s: f64,
    #[serde(default = "default_period")]
    pub sample_period_s: f64,
    /// SOC of the first tick.
    #[serde(default)]
    pub epoch_soc: u32,
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
    #[serde(default)]
    pub rocof_hz_s: f64,
    #[serde(default, rename = "event")]
    pub events: Vec<LoadEvent>,
}

impl ScenarioScript {
    /// A steady scenario with no events.
    pub fn steady(duration_s: f64) -> Self {
        Self {
            schema: SCENARIO_SCHEMA.to_string(),
            duration_s,
            sample_period_s: default_period(),
            epoch_soc: 0,
            frequency_hz: default_frequency(),
            rocof_hz_s: 0.0,
            events: Vec::new(),
        }
    }

    pub fn der_insertion() -> Self {
        Self::from_kv_str(DER_INSERTION_KV).expect("bundled scenario is valid")
    }

    pub fn from_kv_str(text: &str) -> Result<Self, ScenarioError> {
        let script: ScenarioScript =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kv_str(&text)
    }

    pub fn period_us(&self) -> u64 {
        secs_to_micros(self.sample_period_s)
    }

    pub fn epoch_us(&self) -> u64 {
        self.epoch_soc as u64 * TIME_BASE as u64
    }

    pub fn tick_count(&self) -> u64 {
        secs_to_micros(self.duration_s).div_ceil(self.period_us())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(invalid(
                "schema",
                format!("expected `{SCENARIO_SCHEMA}`, found `{}`", self.schema),
            ));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(invalid("duration_s", "must be positive"));
        }
        let period = self.period_us();
        if period == 0
            || (self.sample_period_s * TIME_BASE as f64 - period as f64).abs() > 1e-6
            || TIME_BASE as u64 % period != 0
        {
            return Err(invalid(
                "sample_period_s",
                "must divide one second into a whole number of microsecond ticks",
            ));
        }
        if !self.frequency_hz.is_finite() || !self.rocof_hz_s.is_finite() {
            return Err(invalid("frequency_hz", "must be finite"));
        }
        let mut previous = 0.0;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.time_s >= 0.0 && e.time_s < self.duration_s) {
                return Err(invalid(format!("event[{i}].time_s"), "outside [0, duration)"));
            }
            if e.time_s < previous {
                return Err(invalid(format!("event[{i}].time_s"), "events must be time-ordered"));
            }
            if !(e.ramp_s >= 0.0) {
                return Err(invalid(format!("event[{i}].ramp_s"), "must be non-negative"));
            }
            if !e.p.is_finite() || !e.q.is_finite() {
                return Err(invalid(format!("event[{i}].p"), "must be finite"));
            }
            previous = e.time_s;
        }
        Ok(())
    }

    /// Event-adjusted loads (model node order) at an absolute time.
    pub fn loads_at(&self, model: &GridModel, t_us: u64) -> Result<Vec<Complex64>, ScenarioError> {
        let mut loads = model.loads();
        let rel = t_us.saturating_sub(self.epoch_us());
        for (i, e) in self.events.iter().enumerate() {
            let idx = model
                .index_of(e.node)
                .ok_or_else(|| invalid(format!("event[{i}].node"), format!("unknown node {}", e.node)))?;
            let w = e.weight_at(rel);
            if w > 0.0 {
                loads[idx] += e.delta() * w;
            }
        }
        Ok(loads)
    }
}

/// One truth sample for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub timestamp: GpsTimestamp,
    pub voltage: Phasor,
    pub freq: f64,
    pub rocof: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    voltages: Vec<Phasor>,
    freq: f64,
    rocof: f64,
}

/// Per-node ground-truth phasors on a constant sample grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSeries {
    nodes: Vec<NodeId>,
    epoch_us: u64,
    period_us: u64,
    ticks: u64,
    /// `(first tick, snapshot index)`, strictly increasing in first tick.
    runs: Vec<(u64, usize)>,
    snapshots: Vec<Snapshot>,
}

pub const TRUTH_CSV_HEADER: [&str; 6] = ["time_s", "node", "vmag_pu", "vangle_rad", "freq_hz", "rocof"];

impl TruthSeries {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn tick_count(&self) -> u64 {
        self.ticks
    }

    pub fn period_us(&self) -> u64 {
        self.period_us
    }

    pub fn epoch_us(&self) -> u64 {
        self.epoch_us
    }

    /// Number of distinct network states in the series.
    pub fn distinct_states(&self) -> usize {
        self.snapshots.len()
    }

    pub fn timestamp(&self, tick: u64) -> GpsTimestamp {
        GpsTimestamp::from_micros(self.epoch_us + tick * self.period_us)
    }

    fn snapshot(&self, tick: u64) -> &Snapshot {
        let run = self.runs.partition_point(|&(start, _)| start <= tick) - 1;
        &self.snapshots[self.runs[run].1]
    }

    /// All node voltages (series node order) at a tick.
    pub fn voltages(&self, tick: u64) -> &[Phasor] {
        &self.snapshot(tick).voltages
    }

    pub fn sample(&self, tick: u64, node: NodeId) -> Option<TruthSample> {
        if tick >= self.ticks {
            return None;
        }
        let col = self.nodes.iter().position(|&n| n == node)?;
        let snap = self.snapshot(tick);
        Some(TruthSample {
            timestamp: self.timestamp(tick),
            voltage: snap.voltages[col],
            freq: snap.freq,
            rocof: snap.rocof,
        })
    }

    /// Samples of one node in tick order.
    pub fn node_series(&self, node: NodeId) -> Option<impl Iterator<Item = TruthSample> + '_> {
        let col = self.nodes.iter().position(|&n| n == node)?;
        let mut run = 0;
        Some((0..self.ticks).map(move |tick| {
            while run + 1 < self.runs.len() && self.runs[run + 1].0 <= tick {
                run += 1;
            }
            let snap = &self.snapshots[self.runs[run].1];
            TruthSample {
                timestamp: self.timestamp(tick),
                voltage: snap.voltages[col],
                freq: snap.freq,
                rocof: snap.rocof,
            }
        }))
    }

    fn push(&mut self, snapshot: Snapshot) {
        let tick = self.ticks;
        self.ticks += 1;
        if let Some(&(_, last)) = self.runs.last() {
            if self.snapshots[last] == snapshot {
                return;
            }
        }
        let idx = match self.snapshots.iter().position(|s| *s == snapshot) {
            Some(i) => i,
            None => {
                self.snapshots.push(snapshot);
                self.snapshots.len() - 1
            }
        };
        self.runs.push((tick, idx));
    }

    /// Writes `time_s,node,vmag_pu,vangle_rad,freq_hz,rocof`, one row per node
    /// per tick.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ScenarioError> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| ScenarioError::Csv(e.to_string());
        w.write_record(TRUTH_CSV_HEADER).map_err(csv_err)?;
        for tick in 0..self.ticks {
            let us = self.epoch_us + tick * self.period_us;
            let time = format!("{}.{:06}", us / TIME_BASE as u64, us % TIME_BASE as u64);
            let snap = self.snapshot(tick);
            for (node, v) in self.nodes.iter().zip(&snap.voltages) {
                w.write_record([
                    time.clone(),
                    node.to_string(),
                    v.magnitude.to_string(),
                    v.angle.to_string(),
                    snap.freq.to_string(),
                    snap.rocof.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| ScenarioError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, ScenarioError> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader
            .headers()
            .map_err(|e| ScenarioError::Csv(e.to_string()))?
            .clone();
        if header.iter().ne(TRUTH_CSV_HEADER) {
            return Err(ScenarioError::Csv(format!("unexpected header {header:?}")));
        }
        let mut rows: Vec<(u64, NodeId, Phasor, f64, f64)> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| ScenarioError::Csv(e.to_string()))?;
            let field = |i: usize| -> Result<f64, ScenarioError> {
                record[i]
                    .parse::<f64>()
                    .map_err(|e| ScenarioError::Csv(format!("row {}: column {}: {e}", line + 2, TRUTH_CSV_HEADER[i])))
            };
            let node = record[1]
                .parse::<NodeId>()
                .map_err(|e| ScenarioError::Csv(format!("row {}: node: {e}", line + 2)))?;
            rows.push((
                secs_to_micros(field(0)?),
                node,
                Phasor::new(field(2)?, field(3)?),
                field(4)?,
                field(5)?,
            ));
        }
        let Some(&(epoch_us, ..)) = rows.first() else {
            return Err(ScenarioError::Csv("no samples".into()));
        };
        let nodes: Vec<NodeId> = rows
            .iter()
            .take_while(|r| r.0 == epoch_us)
            .map(|r| r.1)
            .collect();
        if rows.len() % nodes.len() != 0 {
            return Err(ScenarioError::Csv("ragged tick rows".into()));
        }
        let period_us = rows
            .get(nodes.len())
            .map(|r| r.0 - epoch_us)
            .unwrap_or(secs_to_micros(default_period()));
        let mut series = TruthSeries {
            nodes: nodes.clone(),
            epoch_us,
            period_us,
            ticks: 0,
            runs: Vec::new(),
            snapshots: Vec::new(),
        };
        for (tick, chunk) in rows.chunks(nodes.len()).enumerate() {
            let expected = epoch_us + tick as u64 * period_us;
            if chunk.iter().any(|r| r.0 != expected) || chunk.iter().map(|r| r.1).ne(nodes.iter().copied()) {
                return Err(ScenarioError::Csv(format!("tick {tick} is off the sample grid or reorders nodes")));
            }
            series.push(Snapshot {
                voltages: chunk.iter().map(|r| r.2).collect(),
                freq: chunk[0].3,
                rocof: chunk[0].4,
            });
        }
        Ok(series)
    }
}

/// Solves the feeder on every tick of the script.
pub fn run_scenario(model: &GridModel, script: &ScenarioScript) -> Result<TruthSeries, ScenarioError> {
    script.validate()?;
    let period_us = script.period_us();
    let mut series = TruthSeries {
        nodes: model.node_ids(),
        epoch_us: script.epoch_us(),
        period_us,
        ticks: 0,
        runs: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut previous: Option<(Vec<Complex64>, Snapshot)> = None;
    for tick in 0..script.tick_count() {
        let loads = script.loads_at(model, script.epoch_us() + tick * period_us)?;
        let snapshot = match &previous {
            Some((prev_loads, snap)) if *prev_loads == loads => snap.clone(),
            _ => {
                let sol = solve_with_loads(model, &loads, SweepOptions::default())
                    .map_err(|source| ScenarioError::Solver { tick, source })?;
                let snap = Snapshot {
                    voltages: sol.voltages.iter().map(|&v| Phasor::from_rect(v)).collect(),
                    freq: script.frequency_hz,
                    rocof: script.rocof_hz_s,
                };
                previous = Some((loads, snap.clone()));
                snap
            }
        };
        series.push(snapshot);
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_script_is_constant_base_case() {
        let model = GridModel::ieee13_balanced();
        let series = run_scenario(&model, &ScenarioScript::steady(2.0)).unwrap();
        let base = crate::powerflow::solve_radial_power_flow(&model).unwrap();
        assert_eq!(series.tick_count(), 100);
        assert_eq!(series.distinct_states(), 1);
        for tick in [0, 57, 99] {
            for (v, b) in series.voltages(tick).iter().zip(&base.voltages) {
                assert_eq!(*v, Phasor::from_rect(*b));
            }
        }
    }

    #[test]
    fn step_lands_between_20_88_and_20_90() {
        let model = GridModel::ieee13_balanced();
        let script = ScenarioScript::der_insertion();
        let series = run_scenario(&model, &script).unwrap();
        assert_eq!(series.tick_count(), 1500);
        assert_eq!(series.nodes().len() as u64 * series.tick_count(), 19_500);
        let before = series.sample(1044, 33).unwrap();
        let after = series.sample(1045, 33).unwrap();
        assert_eq!(before.timestamp, GpsTimestamp::new(20, 880_000));
        assert_eq!(after.timestamp, GpsTimestamp::new(20, 900_000));
        assert_ne!(before.voltage, after.voltage);
        assert!(after.voltage.magnitude > before.voltage.magnitude);
        assert_eq!(series.sample(0, 33).unwrap().voltage, before.voltage);
        assert_eq!(series.sample(1499, 33).unwrap().voltage, after.voltage);
        assert_eq!(series.distinct_states(), 2);
    }

    #[test]
    fn ramp_interpolates() {
        let model = GridModel::ieee13_balanced();
        let mut script = ScenarioScript::steady(1.0);
        script.events.push(LoadEvent { time_s: 0.2, node: 75, p: -0.2, q: 0.0, ramp_s: 0.1 });
        let series = run_scenario(&model, &script).unwrap();
        // ticks 10..=15 are distinct: start, four ramp steps, plateau
        assert_eq!(series.distinct_states(), 6);
        let mid = script.loads_at(&model, 250_000).unwrap();
        let idx = model.index_of(75).unwrap();
        assert!((mid[idx] - (model.loads()[idx] + Complex64::new(-0.1, 0.0))).norm() < 1e-12);
    }

    #[test]
    fn timestamps_are_uniform() {
        let model = GridModel::ieee13_balanced();
        let mut script = ScenarioScript::steady(1.0);
        script.epoch_soc = 1_700_000_000;
        let series = run_scenario(&model, &script).unwrap();
        let stamps: Vec<_> = series.node_series(71).unwrap().map(|s| s.timestamp).collect();
        assert_eq!(stamps.len(), 50);
        for pair in stamps.windows(2) {
            assert_eq!(pair[1].as_micros() - pair[0].as_micros(), 20_000);
        }
        assert_eq!(stamps[0], GpsTimestamp::new(1_700_000_000, 0));
    }

    #[test]
    fn script_validation() {
        let mut s = ScenarioScript::steady(10.0);
        s.sample_period_s = 0.03;
        assert!(s.validate().unwrap_err().to_string().starts_with("sample_period_s"));
        let mut s = ScenarioScript::steady(10.0);
        s.events.push(LoadEvent { time_s: 10.0, node: 75, p: 0.0, q: 0.0, ramp_s: 0.0 });
        assert!(s.validate().unwrap_err().to_string().starts_with("event[0].time_s"));
        let mut s = ScenarioScript::steady(10.0);
        s.events.push(LoadEvent { time_s: 5.0, node: 75, p: 0.0, q: 0.0, ramp_s: 0.0 });
        s.events.push(LoadEvent { time_s: 4.0, node: 75, p: 0.0, q: 0.0, ramp_s: 0.0 });
        assert!(s.validate().is_err());
        let mut s = ScenarioScript::steady(10.0);
        s.events.push(LoadEvent { time_s: 5.0, node: 999, p: 0.0, q: 0.0, ramp_s: 0.0 });
        let model = GridModel::ieee13_balanced();
        assert!(run_scenario(&model, &s).unwrap_err().to_string().contains("unknown node 999"));
    }

    #[test]
    fn kv_round_trip() {
        let s = ScenarioScript::der_insertion();
        assert_eq!(ScenarioScript::from_kv_str(&s.to_kv_string()).unwrap(), s);
    }

    #[test]
    fn csv_round_trip() {
        let model = GridModel::ieee13_balanced();
        let mut script = ScenarioScript::der_insertion();
        script.duration_s = 22.0;
        let series = run_scenario(&model, &script).unwrap();
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time_s,node,vmag_pu,vangle_rad,freq_hz,rocof\n0.000000,31,"));
        let back = TruthSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, series);
    }

    #[test]
    fn deterministic() {
        let model = GridModel::ieee13_balanced();
        let script = ScenarioScript::der_insertion();
        assert_eq!(run_scenario(&model, &script).unwrap(), run_scenario(&model, &script).unwrap());
    }
}
