//! Run artifacts on disk: CSVs, the record log, the summary, and the
//! figure exports derived from them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gridmesh_core::grid::NodeId;
use gridmesh_core::scenario::TruthSeries;
use gridmesh_dsse::store::{audit_alignment, write_projections_csv, NodeProjection};
use serde::{Deserialize, Serialize};

use crate::experiment::{ClockMode, CloudMode, Mode};
use crate::latency::{evaluate_tt_classes, write_latency_csv};
use crate::ledger::Link;
use crate::run::RunResult;

pub const LEDGER_CSV: &str = "ledger.csv";
pub const LATENCY_CSV: &str = "latency.csv";
pub const RECORDS_CSV: &str = "records.csv";
pub const RECORDS_LOG: &str = "records.log";
pub const EMITTED_CSV: &str = "emitted.csv";
pub const TRUTH_CSV: &str = "truth.csv";
pub const RATE_TRACE_CSV: &str = "rate_trace.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const SUMMARY_KV: &str = "summary.kv";
pub const CONFIG_KV: &str = "experiment.kv";

/// Truth above this many samples is not written out (day-long runs).
const TRUTH_CSV_LIMIT: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub clock: ClockMode,
    pub cloud: CloudMode,
    pub model: String,
    pub scenario: String,
    pub duration_s: f64,
    pub pmus: usize,
    pub seed: u64,
    pub wan_delay_ms: f64,
    pub wan_jitter_ms: f64,
    pub frame_bytes: Option<u64>,
    pub pmu_vo_frames: u64,
    pub pmu_vo_bytes: u64,
    pub vo_cloud_frames: u64,
    pub vo_cloud_bytes: u64,
    pub avg_cloud_fps_per_pmu: f64,
    pub estimations: usize,
    pub estimation_errors: usize,
    pub reordered: u64,
    pub skipped: u64,
    pub lost: u64,
    pub latency_reports: usize,
    pub avg_total_ms: Option<f64>,
    pub tt1_pct: Option<f64>,
    pub tt2_pct: Option<f64>,
    pub max_compute_ms: Option<f64>,
    pub runtime_s: f64,
    #[serde(rename = "check")]
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }

    pub fn from_kv_str(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k:<36}{v}\n"));
        line("mode", self.mode.to_string());
        line("clock / cloud", format!("{:?} / {:?}", self.clock, self.cloud));
        line("scenario", format!("{} ({} s, {} PMUs)", self.scenario, self.duration_s, self.pmus));
        line("pmu->vo", format!("{} frames, {} B", self.pmu_vo_frames, self.pmu_vo_bytes));
        line("vo->cloud", format!("{} frames, {} B", self.vo_cloud_frames, self.vo_cloud_bytes));
        line("avg vo->cloud rate", format!("{:.3} fps per PMU", self.avg_cloud_fps_per_pmu));
        line(
            "estimations",
            format!("{} ({} errors, {} skipped)", self.estimations, self.estimation_errors, self.skipped),
        );
        if let (Some(avg), Some(t1), Some(t2)) = (self.avg_total_ms, self.tt1_pct, self.tt2_pct) {
            line("latency", format!("{} reports, avg {avg:.2} ms", self.latency_reports));
            line("TT1 (<= 1000 ms)", format!("{t1:.2} %"));
            line("TT2 (<= 500 ms)", format!("{t2:.2} %"));
        }
        if let Some(m) = self.max_compute_ms {
            line("max solve+persist", format!("{m:.3} ms"));
        }
        line("runtime", format!("{:.2} s", self.runtime_s));
        for c in &self.checks {
            line(&format!("check {}", c.name), format!("{} ({})", if c.passed { "PASS" } else { "FAIL" }, c.detail));
        }
        s
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Checks that a single run can decide on its own.
pub fn run_checks(r: &RunResult) -> Vec<Check> {
    let mut out = Vec::new();
    let cloud = r.ledger.total(Link::VoToCloud);
    let sum: u64 = r
        .ledger
        .sources(Link::VoToCloud)
        .iter()
        .filter_map(|s| r.ledger.counters(Link::VoToCloud, s))
        .flat_map(|c| c.per_second.values().map(|b| b.bytes))
        .sum();
    let mut exact = sum == cloud.bytes;
    if let Some(b) = r.ledger.fixed_size() {
        exact &= cloud.bytes == cloud.frames * b;
    }
    out.push(check("ledger-exact", exact, format!("{} B over {} frames", cloud.bytes, cloud.frames)));
    if r.config.cloud == CloudMode::Full {
        let expected = cloud.frames - r.skipped - r.lost;
        out.push(check(
            "one-estimation-per-report",
            r.records.len() as u64 == expected,
            format!("{} records for {} accepted reports", r.records.len(), expected),
        ));
        if r.skipped == 0 && r.lost == 0 {
            let audit = audit_alignment(&r.records);
            out.push(check(
                "alignment-audit",
                audit.is_ok(),
                match audit {
                    Ok(n) => format!("{n} records, {} reordered arrivals", r.reordered),
                    Err(e) => e.to_string(),
                },
            ));
        }
    }
    if r.config.mode != Mode::Fixed50 {
        let rate = r.average_cloud_rate();
        out.push(check("adaptive-rate", rate < 15.0, format!("{rate:.3} fps per PMU < 15")));
    }
    if r.config.clock == ClockMode::Wall {
        match evaluate_tt_classes(&r.latencies) {
            Ok(tt) => {
                let t1 = tt.class("TT1").expect("evaluated").dependability_pct;
                let t2 = tt.class("TT2").expect("evaluated").dependability_pct;
                out.push(check(
                    "tt-classes",
                    t1 == 100.0 && t2 >= 99.0,
                    format!("TT1 {t1:.2} %, TT2 {t2:.2} % over {} reports", tt.reports),
                ));
            }
            Err(e) => out.push(check("tt-classes", false, e.to_string())),
        }
        let max = r.latencies.iter().map(|l| l.compute_ms()).fold(0.0, f64::max);
        out.push(check("compute-under-100ms", max < 100.0, format!("max {max:.3} ms")));
    }
    out
}

pub fn summarize(r: &RunResult) -> Summary {
    let cfg = &r.config;
    let pmu = r.ledger.total(Link::PmuToVo);
    let cloud = r.ledger.total(Link::VoToCloud);
    let tt = evaluate_tt_classes(&r.latencies).ok();
    let pct = |name: &str| tt.as_ref().and_then(|t| t.class(name)).map(|c| c.dependability_pct);
    Summary {
        mode: cfg.mode,
        clock: cfg.clock,
        cloud: cfg.cloud,
        model: r.model.name().to_string(),
        scenario: cfg.scenario.clone(),
        duration_s: r.ledger.duration_s(),
        pmus: r.pmus(),
        seed: cfg.seed,
        wan_delay_ms: cfg.wan_delay_ms().unwrap_or(0.0),
        wan_jitter_ms: cfg.wan_jitter_ms().unwrap_or(0.0),
        frame_bytes: cfg.frame_bytes,
        pmu_vo_frames: pmu.frames,
        pmu_vo_bytes: pmu.bytes,
        vo_cloud_frames: cloud.frames,
        vo_cloud_bytes: cloud.bytes,
        avg_cloud_fps_per_pmu: r.average_cloud_rate(),
        estimations: r.records.len(),
        estimation_errors: r.estimation_errors(),
        reordered: r.reordered,
        skipped: r.skipped,
        lost: r.lost,
        latency_reports: r.latencies.len(),
        avg_total_ms: tt.as_ref().map(|t| t.classes[0].average_delay_ms),
        tt1_pct: pct("TT1"),
        tt2_pct: pct("TT2"),
        max_compute_ms: (!r.latencies.is_empty())
            .then(|| r.latencies.iter().map(|l| l.compute_ms()).fold(0.0, f64::max)),
        runtime_s: r.runtime_s,
        checks: run_checks(r),
    }
}

pub fn projections(r: &RunResult) -> Vec<NodeProjection> {
    r.records
        .iter()
        .flat_map(|rec| {
            rec.voltages.iter().map(move |(&node, v)| NodeProjection {
                seq: rec.seq,
                time_s: rec.trigger.ts.as_secs_f64(),
                trigger_vo: rec.trigger.vo_id.clone(),
                node,
                vmag_pu: v.magnitude,
                vangle_rad: v.angle,
            })
        })
        .collect()
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
}

/// Writes every artifact of a run into `dir` and returns its summary.
pub fn write_artifacts(r: &RunResult, dir: &Path) -> anyhow::Result<Summary> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_KV), r.config.to_kv_string())?;
    r.ledger.write_csv(create(dir, LEDGER_CSV)?)?;
    write_latency_csv(&r.latencies, create(dir, LATENCY_CSV)?)?;
    write_projections_csv(&projections(r), create(dir, RECORDS_CSV)?)?;
    let mut w = csv::Writer::from_writer(create(dir, EMITTED_CSV)?);
    w.write_record(["vo_id", "node", "ts_s", "rr", "vmag_pu", "vangle_rad"])?;
    for p in &r.emitted {
        w.write_record([
            p.vo_id.clone(),
            p.node.to_string(),
            p.ts_s.to_string(),
            p.rr.to_string(),
            p.vmag_pu.to_string(),
            p.vangle_rad.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(dir, RATE_TRACE_CSV)?);
    w.write_record(["vo_id", "at_s", "from", "to", "cause"])?;
    for (vo, trace) in &r.rate_traces {
        for c in trace {
            w.write_record([
                vo.clone(),
                c.at.as_secs_f64().to_string(),
                c.from.to_string(),
                c.to.to_string(),
                format!("{:?}", c.cause).to_lowercase(),
            ])?;
        }
    }
    w.flush()?;
    if r.truth.tick_count() * r.truth.nodes().len() as u64 <= TRUTH_CSV_LIMIT {
        r.truth.write_csv(create(dir, TRUTH_CSV)?)?;
    }
    let summary = summarize(r);
    std::fs::write(dir.join(SUMMARY_KV), summary.to_kv_string())?;
    std::fs::write(dir.join(SUMMARY_TXT), summary.to_text())?;
    Ok(summary)
}

#[derive(Debug, Deserialize)]
struct EmittedRow {
    vo_id: String,
    node: NodeId,
    ts_s: f64,
    vmag_pu: f64,
}

#[derive(Debug, Deserialize)]
struct LedgerRow {
    link: String,
    source: String,
    second: u64,
    frames: u64,
    bytes: u64,
}

fn reader(dir: &Path, name: &str) -> anyhow::Result<csv::Reader<BufReader<File>>> {
    let p = dir.join(name);
    let f = File::open(&p).with_context(|| format!("missing artifact {}", p.display()))?;
    Ok(csv::Reader::from_reader(BufReader::new(f)))
}

fn micros(t: f64) -> u64 {
    (t * 1e6).round() as u64
}

/// Builds the three figure CSVs from one or more run directories:
///
/// - `fig_vo_points.csv`: PMU-node truth per tick beside the points each VO
///   sent (`emitted_vmag_pu` empty when nothing was sent at that tick).
/// - `fig_node<N>.csv`: the estimated trajectory of `node` per run, with
///   the truth at each trigger.
/// - `fig_load.csv`: vo→cloud frames per second per PMU.
pub fn export_figures(runs: &[PathBuf], node: NodeId, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if runs.is_empty() {
        bail!("no run directories given");
    }
    std::fs::create_dir_all(out)?;
    let vo_path = out.join("fig_vo_points.csv");
    let node_path = out.join(format!("fig_node{node}.csv"));
    let load_path = out.join("fig_load.csv");
    let mut vo_w = csv::Writer::from_path(&vo_path)?;
    vo_w.write_record(["mode", "vo_id", "node", "time_s", "truth_vmag_pu", "emitted_vmag_pu"])?;
    let mut node_w = csv::Writer::from_path(&node_path)?;
    node_w.write_record(["mode", "seq", "time_s", "estimated_vmag_pu", "truth_vmag_pu"])?;
    let mut load_w = csv::Writer::from_path(&load_path)?;
    load_w.write_record(["mode", "source", "second", "frames_per_s", "bytes"])?;

    for dir in runs {
        let summary_path = dir.join(SUMMARY_KV);
        let summary = Summary::from_kv_str(
            &std::fs::read_to_string(&summary_path).with_context(|| format!("missing artifact {}", summary_path.display()))?,
        )?;
        let mode = summary.mode.to_string();
        let truth_path = dir.join(TRUTH_CSV);
        let truth = if truth_path.exists() {
            Some(TruthSeries::read_csv(BufReader::new(File::open(&truth_path)?))?)
        } else {
            None
        };
        let truth_at = |n: NodeId, t: f64| -> Option<f64> {
            let truth = truth.as_ref()?;
            let tick = micros(t).checked_sub(truth.epoch_us())? / truth.period_us();
            truth.sample(tick, n).map(|s| s.voltage.magnitude)
        };

        let mut emitted: BTreeMap<(String, u64), (NodeId, f64)> = BTreeMap::new();
        for row in reader(dir, EMITTED_CSV)?.deserialize::<EmittedRow>() {
            let row = row?;
            emitted.insert((row.vo_id, micros(row.ts_s)), (row.node, row.vmag_pu));
        }
        if let Some(truth) = &truth {
            let vos: BTreeMap<String, NodeId> = emitted.iter().map(|((vo, _), (n, _))| (vo.clone(), *n)).collect();
            for (vo, n) in vos {
                for tick in 0..truth.tick_count() {
                    let ts = truth.timestamp(tick);
                    let Some(s) = truth.sample(tick, n) else { break };
                    let sent = emitted.get(&(vo.clone(), ts.as_micros())).map(|(_, v)| v.to_string());
                    vo_w.write_record([
                        mode.clone(),
                        vo.clone(),
                        n.to_string(),
                        ts.as_secs_f64().to_string(),
                        s.voltage.magnitude.to_string(),
                        sent.unwrap_or_default(),
                    ])?;
                }
            }
        }

        for row in reader(dir, RECORDS_CSV)?.deserialize::<NodeProjection>() {
            let row = row?;
            if row.node != node {
                continue;
            }
            node_w.write_record([
                mode.clone(),
                row.seq.to_string(),
                row.time_s.to_string(),
                row.vmag_pu.to_string(),
                truth_at(node, row.time_s).map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }

        for row in reader(dir, LEDGER_CSV)?.deserialize::<LedgerRow>() {
            let row = row?;
            if row.link != Link::VoToCloud.as_str() {
                continue;
            }
            load_w.write_record([
                mode.clone(),
                row.source,
                row.second.to_string(),
                row.frames.to_string(),
                row.bytes.to_string(),
            ])?;
        }
    }
    vo_w.flush()?;
    node_w.flush()?;
    load_w.flush()?;
    Ok(vec![vo_path, node_path, load_path])
}
