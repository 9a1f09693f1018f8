//! Estimation records and their append-only log.
//!
//! File format: the first line is exactly `# gridmesh-records v1`; every
//! following line is one [`EstimationRecord`] as a single JSON object,
//! terminated by `\n`, in sequence order. Records are never rewritten. On
//! open, the log is replayed into an in-memory index keyed by trigger time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gridmesh_core::grid::NodeId;
use gridmesh_core::time::GpsTimestamp;
use gridmesh_core::{Complex64, Phasor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_HEADER: &str = "# gridmesh-records v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: not a record log (bad header)")]
    BadHeader { path: String },
    #[error("{path}:{line}: {message}")]
    BadRecord { path: String, line: usize, message: String },
    #[error("record sequence {got} does not follow {last}")]
    Sequence { last: u64, got: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// The report whose timestamp triggered an estimation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub vo_id: String,
    pub ts: GpsTimestamp,
}

/// One VO measurement used by an estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceUse {
    pub vo_id: String,
    pub node: NodeId,
    pub ts: GpsTimestamp,
    pub staleness_s: f64,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedState {
    /// `[re, im]` of the root voltage.
    pub root: [f64; 2],
    /// `[re, im]` per branch, model branch order.
    pub branches: Vec<[f64; 2]>,
}

impl EstimatedState {
    pub fn from_complex(root: Complex64, branches: &[Complex64]) -> Self {
        Self {
            root: [root.re, root.im],
            branches: branches.iter().map(|c| [c.re, c.im]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRecord {
    pub seq: u64,
    pub trigger: Trigger,
    pub sources: Vec<SourceUse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<EstimatedState>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub voltages: BTreeMap<NodeId, Phasor>,
    #[serde(default)]
    pub residual: f64,
    /// Linear solves performed (relinearization passes).
    #[serde(default)]
    pub passes: usize,
    /// Receive to start of solve.
    pub queue_ms: f64,
    pub solve_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EstimationRecord {
    pub fn is_estimate(&self) -> bool {
        self.error.is_none()
    }

    pub fn all_fresh(&self) -> bool {
        self.sources.iter().all(|s| s.staleness_s == 0.0)
    }
}

/// One node's estimated voltage from one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeProjection {
    pub seq: u64,
    pub time_s: f64,
    pub trigger_vo: String,
    pub node: NodeId,
    pub vmag_pu: f64,
    pub vangle_rad: f64,
}

/// Append-only record log with an in-memory time index.
pub struct RecordStore {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    records: Vec<EstimationRecord>,
    by_time: BTreeMap<(u64, u64), usize>,
}

impl RecordStore {
    /// A store that keeps records only in memory.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            writer: None,
            records: Vec::new(),
            by_time: BTreeMap::new(),
        }
    }

    /// Opens or creates a log, replaying existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::in_memory();
        if path.exists() && std::fs::metadata(&path)?.len() > 0 {
            let reader = BufReader::new(File::open(&path)?);
            let shown = path.display().to_string();
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if i == 0 {
                    if line != LOG_HEADER {
                        return Err(StoreError::BadHeader { path: shown });
                    }
                    continue;
                }
                if line.is_empty() {
                    continue;
                }
                let rec: EstimationRecord = serde_json::from_str(&line).map_err(|e| StoreError::BadRecord {
                    path: shown.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                store.index(rec)?;
            }
            let file = OpenOptions::new().append(true).open(&path)?;
            store.writer = Some(BufWriter::new(file));
        } else {
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "{LOG_HEADER}")?;
            w.flush()?;
            store.writer = Some(w);
        }
        store.path = Some(path);
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn index(&mut self, rec: EstimationRecord) -> Result<(), StoreError> {
        if let Some(last) = self.records.last() {
            if rec.seq <= last.seq {
                return Err(StoreError::Sequence { last: last.seq, got: rec.seq });
            }
        }
        self.by_time.insert((rec.trigger.ts.as_micros(), rec.seq), self.records.len());
        self.records.push(rec);
        Ok(())
    }

    /// Appends and flushes one record. Sequence numbers must increase.
    pub fn append(&mut self, rec: EstimationRecord) -> Result<(), StoreError> {
        if let Some(last) = self.records.last() {
            if rec.seq <= last.seq {
                return Err(StoreError::Sequence { last: last.seq, got: rec.seq });
            }
        }
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.index(rec)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.records.last().map(|r| r.seq)
    }

    /// All records in sequence order.
    pub fn records(&self) -> &[EstimationRecord] {
        &self.records
    }

    /// Records with trigger time in `[from, to)`, ordered by trigger time
    /// then sequence.
    pub fn range(&self, from: GpsTimestamp, to: GpsTimestamp) -> Vec<&EstimationRecord> {
        let (a, b) = (from.as_micros(), to.as_micros());
        if a >= b {
            return Vec::new();
        }
        self.by_time
            .range((a, 0)..(b, 0))
            .map(|(_, &i)| &self.records[i])
            .collect()
    }

    /// Per-node voltage rows for successful estimates in `[from, to)`,
    /// restricted to `nodes` when given.
    pub fn query(&self, from: GpsTimestamp, to: GpsTimestamp, nodes: Option<&BTreeSet<NodeId>>) -> Vec<NodeProjection> {
        let mut out = Vec::new();
        for rec in self.range(from, to) {
            for (&node, v) in &rec.voltages {
                if nodes.is_some_and(|set| !set.contains(&node)) {
                    continue;
                }
                out.push(NodeProjection {
                    seq: rec.seq,
                    time_s: rec.trigger.ts.as_secs_f64(),
                    trigger_vo: rec.trigger.vo_id.clone(),
                    node,
                    vmag_pu: v.magnitude,
                    vangle_rad: v.angle,
                });
            }
        }
        out
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
            w.get_ref().sync_data()?;
        }
        Ok(())
    }
}

impl Drop for RecordStore {
    fn drop(&mut self) {
        if let Some(w) = self.writer.as_mut() {
            let _ = w.flush();
        }
    }
}

/// A record whose sources disagree with what had been received when it ran.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("record {seq}: VO `{vo_id}` used {used:?}, expected {expected:?}")]
pub struct AuditViolation {
    pub seq: u64,
    pub vo_id: String,
    pub used: Option<GpsTimestamp>,
    pub expected: Option<GpsTimestamp>,
}

/// Replays a log in sequence order and checks that every record used, per
/// VO, the newest report at or before its trigger among the reports received
/// up to that point. The received set is reconstructed from the triggers
/// themselves, so the log must hold one record per accepted report.
/// Returns the number of records checked.
pub fn audit_alignment(records: &[EstimationRecord]) -> Result<usize, AuditViolation> {
    let mut received: BTreeMap<&str, BTreeSet<GpsTimestamp>> = BTreeMap::new();
    for rec in records {
        received.entry(rec.trigger.vo_id.as_str()).or_default().insert(rec.trigger.ts);
        let used: BTreeMap<&str, GpsTimestamp> = rec.sources.iter().map(|s| (s.vo_id.as_str(), s.ts)).collect();
        let vos: BTreeSet<&str> = received.keys().chain(used.keys()).copied().collect();
        for vo in vos {
            let expected = received.get(vo).and_then(|set| set.range(..=rec.trigger.ts).next_back().copied());
            let got = used.get(vo).copied();
            if got != expected {
                return Err(AuditViolation {
                    seq: rec.seq,
                    vo_id: vo.to_string(),
                    used: got,
                    expected,
                });
            }
        }
    }
    Ok(records.len())
}

/// Writes projections as `seq,time_s,trigger_vo,node,vmag_pu,vangle_rad`.
pub fn write_projections_csv<W: Write>(rows: &[NodeProjection], out: W) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["seq", "time_s", "trigger_vo", "node", "vmag_pu", "vangle_rad"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
