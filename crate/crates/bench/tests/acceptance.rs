//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any fails. Run with
//! `cargo test -p gridmesh-bench --test acceptance`.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use gridmesh_bench::ledger::Link;
use gridmesh_bench::latency::evaluate_tt_classes;
use gridmesh_bench::{run_experiment, ClockMode, CloudMode, ExperimentConfig, Mode, PseudoMode, RunResult};
use gridmesh_core::grid::{Branch, GridModel, Node};
use gridmesh_core::powerflow::{solve_with_loads, SweepOptions};
use gridmesh_core::scenario::ScenarioScript;
use gridmesh_core::wire::{decode_frame, encode_frame, PmuDataFrame, Status};
use gridmesh_core::wls::{build_gain, Measurement, MeasurementKind, MeasurementSet, MeasurementSlot};
use gridmesh_core::{Complex64, GpsTimestamp, Phasor};
use gridmesh_dsse::broker::{topic_matches, validate_filter};
use gridmesh_dsse::store::{audit_alignment, RecordStore};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn main() -> ExitCode {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("ledger-exact-long-runs", ledger_exact_long_runs),
        ("adaptive-average-rate", adaptive_average_rate),
        ("filtered-bytes-ratio", filtered_bytes_ratio),
        ("rate-trace", rate_trace),
        ("estimator-oracle", estimator_oracle),
        ("decoder-robustness", decoder_robustness),
        ("timeliness-classes", timeliness_classes),
        ("alignment-audit", alignment_audit),
        ("topic-matching", topic_matching),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}; {secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}; {secs:.1}s)", i + 1)
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn run(cfg: &ExperimentConfig) -> Result<RunResult, String> {
    run_experiment(cfg).map_err(|e| format!("{e:#}"))
}

fn ledger_exact_long_runs() -> Outcome {
    let mut details = Vec::new();
    for (scenario, expected) in [("steady:3600", 25_200_000u64), ("steady:86400", 604_800_000)] {
        let mut c = ExperimentConfig::new(Mode::Fixed50);
        c.scenario = scenario.into();
        c.cloud = CloudMode::LedgerOnly;
        c.frame_bytes = Some(70);
        let r = run(&c)?;
        let bytes = r.ledger.total(Link::VoToCloud).bytes;
        ensure(bytes == expected, || format!("{scenario}: {bytes} B, expected {expected}"))?;
        details.push(format!("{scenario} {bytes} B in {:.1}s", r.runtime_s));
    }
    Ok(details.join(", "))
}

fn adaptive_average_rate() -> Outcome {
    let r = run(&ExperimentConfig::new(Mode::Adaptive))?;
    let rate = r.average_cloud_rate();
    ensure(rate < 15.0, || format!("{rate:.3} fps per PMU"))?;
    Ok(format!("{rate:.3} fps per PMU over {} reports", r.ledger.total(Link::VoToCloud).frames))
}

fn filtered_bytes_ratio() -> Outcome {
    let full = run(&ExperimentConfig::new(Mode::Adaptive))?.ledger.total(Link::VoToCloud);
    let filtered = run(&ExperimentConfig::new(Mode::AdaptiveFiltered))?.ledger.total(Link::VoToCloud);
    ensure(full.frames == filtered.frames, || format!("report counts differ: {} vs {}", full.frames, filtered.frames))?;
    let ratio = filtered.bytes as f64 / full.bytes as f64;
    ensure((0.20..=0.40).contains(&ratio), || format!("ratio {:.1}%", 100.0 * ratio))?;
    Ok(format!("{} / {} B = {:.1}%", filtered.bytes, full.bytes, 100.0 * ratio))
}

fn rate_trace() -> Outcome {
    let r = run(&ExperimentConfig::new(Mode::Adaptive))?;
    let expected = [(20.9, 1, 50), (21.0, 50, 25), (22.0, 25, 10), (23.0, 10, 1)];
    ensure(r.rate_traces.len() == r.pmus(), || format!("{} traces for {} PMUs", r.rate_traces.len(), r.pmus()))?;
    for (vo, trace) in &r.rate_traces {
        let got: Vec<(f64, u32, u32)> = trace.iter().map(|c| (c.at.as_secs_f64(), c.from, c.to)).collect();
        let same = got.len() == expected.len()
            && got.iter().zip(&expected).all(|(g, e)| (g.0 - e.0).abs() < 1e-9 && g.1 == e.1 && g.2 == e.2);
        ensure(same, || format!("{vo}: {got:?}"))?;
    }
    Ok(format!("{} VOs: 20.9s 1>50, 21s 50>25, 22s 25>10, 23s 10>1", r.rate_traces.len()))
}

// Measurement rows written out from the branch-current formulation:
// V_n = V_root - sum over the root path of Z_b I_b, and the load current at
// n is the feeding branch current minus the currents leaving n.
struct Physics {
    parent: HashMap<u32, usize>,
    branches: Vec<Branch>,
}

impl Physics {
    fn new(model: &GridModel) -> Self {
        let branches = model.branches().to_vec();
        let parent = branches.iter().enumerate().map(|(i, b)| (b.to, i)).collect();
        Self { parent, branches }
    }

    fn dim(&self) -> usize {
        2 + 2 * self.branches.len()
    }

    fn rows(&self, slot: &MeasurementSlot) -> [Vec<f64>; 2] {
        let mut re = vec![0.0; self.dim()];
        let mut im = vec![0.0; self.dim()];
        match slot.kind {
            MeasurementKind::VoltagePhasor => {
                re[0] = 1.0;
                im[1] = 1.0;
                let mut at = slot.node;
                while let Some(&b) = self.parent.get(&at) {
                    let z = self.branches[b].impedance;
                    re[2 + 2 * b] -= z.re;
                    re[3 + 2 * b] += z.im;
                    im[2 + 2 * b] -= z.im;
                    im[3 + 2 * b] -= z.re;
                    at = self.branches[b].from;
                }
            }
            MeasurementKind::LoadCurrent => {
                if let Some(&b) = self.parent.get(&slot.node) {
                    re[2 + 2 * b] += 1.0;
                    im[3 + 2 * b] += 1.0;
                }
                for (b, _) in self.branches.iter().enumerate().filter(|(_, br)| br.from == slot.node) {
                    re[2 + 2 * b] -= 1.0;
                    im[3 + 2 * b] -= 1.0;
                }
            }
        }
        [re, im]
    }

    fn measure(&self, slot: &MeasurementSlot, x: &[f64]) -> Complex64 {
        let [re, im] = self.rows(slot);
        let dot = |r: &[f64]| r.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        Complex64::new(dot(&re), dot(&im))
    }
}

/// Dense weighted normal equations solved by Gauss-Jordan elimination with
/// partial pivoting.
fn normal_equations(rows: &[Vec<f64>], w: &[f64], z: &[f64]) -> Vec<f64> {
    let n = rows[0].len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (row, (&wi, &zi)) in rows.iter().zip(w.iter().zip(z)) {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += row[i] * wi * row[j];
            }
            a[i][n] += row[i] * wi * zi;
        }
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=n {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

fn random_feeder(rng: &mut ChaCha8Rng) -> GridModel {
    let count = rng.random_range(1..=12u32);
    let c = |re, im| Complex64::new(re, im);
    let nodes = (0..=count)
        .map(|i| Node { id: 10 + i, load: c(rng.random_range(0.0..0.1), rng.random_range(-0.02..0.05)), label: None })
        .collect();
    let branches = (1..=count)
        .map(|i| Branch {
            from: 10 + rng.random_range(0..i),
            to: 10 + i,
            impedance: c(rng.random_range(0.001..0.05), rng.random_range(0.001..0.08)),
        })
        .collect();
    GridModel::new("random", nodes, branches, Phasor::new(1.0, 0.0), c(0.01, 0.08)).unwrap()
}

fn random_slots(rng: &mut ChaCha8Rng, model: &GridModel) -> Vec<MeasurementSlot> {
    let mut slots = vec![MeasurementSlot { kind: MeasurementKind::VoltagePhasor, node: model.root(), variance: 1e-6 }];
    for node in model.nodes().iter().skip(1) {
        if rng.random_bool(0.3) {
            slots.push(MeasurementSlot {
                kind: MeasurementKind::VoltagePhasor,
                node: node.id,
                variance: rng.random_range(1e-7..1e-5),
            });
        }
        slots.push(MeasurementSlot {
            kind: MeasurementKind::LoadCurrent,
            node: node.id,
            variance: rng.random_range(1e-4..1e-2),
        });
    }
    slots
}

fn measurement_set(slots: &[MeasurementSlot], values: &[Complex64]) -> MeasurementSet {
    MeasurementSet::new(
        slots
            .iter()
            .zip(values)
            .map(|(s, &v)| match s.kind {
                MeasurementKind::VoltagePhasor => Measurement::voltage(s.node, v, s.variance),
                MeasurementKind::LoadCurrent => Measurement::load_current(s.node, v, s.variance),
            })
            .collect(),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn estimator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut worst_noisy, mut worst_exact) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let model = random_feeder(&mut rng);
        let physics = Physics::new(&model);
        let slots = random_slots(&mut rng, &model);
        let cache = build_gain(&model, &slots).map_err(|e| format!("case {case}: {e}"))?;

        let mut x_true = vec![1.0 + rng.random_range(-0.02..0.02), rng.random_range(-0.05..0.05)];
        x_true.extend((0..2 * model.branches().len()).map(|_| rng.random_range(-0.3..0.3)));
        let exact: Vec<Complex64> = slots.iter().map(|s| physics.measure(s, &x_true)).collect();
        let noisy: Vec<Complex64> = exact
            .iter()
            .zip(&slots)
            .map(|(v, s)| {
                let sd = s.variance.sqrt();
                v + Complex64::new(rng.random_range(-sd..sd), rng.random_range(-sd..sd))
            })
            .collect();

        let rows: Vec<Vec<f64>> = slots.iter().flat_map(|s| physics.rows(s)).collect();
        let w: Vec<f64> = slots.iter().flat_map(|s| [1.0 / s.variance; 2]).collect();
        let z: Vec<f64> = noisy.iter().flat_map(|v| [v.re, v.im]).collect();
        let expected = normal_equations(&rows, &w, &z);
        let got = cache.estimate(&measurement_set(&slots, &noisy)).map_err(|e| e.to_string())?;
        let d = max_diff(&got.state.to_real(), &expected);
        ensure(d < 1e-9, || format!("case {case}: estimate differs from normal equations by {d:e}"))?;
        worst_noisy = worst_noisy.max(d);

        let got = cache.estimate(&measurement_set(&slots, &exact)).map_err(|e| e.to_string())?;
        let d = max_diff(&got.state.to_real(), &x_true);
        ensure(d < 1e-10, || format!("case {case}: exact measurements recovered to {d:e}"))?;
        worst_exact = worst_exact.max(d);
    }

    let mut tracked = Vec::new();
    for mode in [Mode::Fixed50, Mode::Adaptive] {
        let mut c = ExperimentConfig::new(mode);
        c.noise = false;
        c.pseudos = PseudoMode::Truth;
        let r = run(&c)?;
        let script = ScenarioScript::der_insertion();
        let idx = r.model.index_of(33).ok_or("node 33 missing")?;
        let (mut compared, mut worst, mut pre, mut post) = (0usize, 0.0f64, f64::NAN, f64::NAN);
        for rec in r.records.iter().filter(|rec| rec.is_estimate() && rec.all_fresh() && rec.sources.len() == r.pmus()) {
            let t = rec.trigger.ts.as_micros();
            let loads = script.loads_at(&r.model, t).map_err(|e| e.to_string())?;
            let pf = solve_with_loads(&r.model, &loads, SweepOptions::default()).map_err(|e| e.to_string())?;
            let truth = pf.voltages[idx].norm();
            let est = rec.voltages[&33].magnitude;
            worst = worst.max((est - truth).abs());
            compared += 1;
            if t < 20_900_000 {
                pre = est;
            } else if post.is_nan() || t >= 25_000_000 {
                post = est;
            }
        }
        ensure(compared > 0, || format!("{mode}: no fresh two-source records"))?;
        ensure(worst < 1e-6, || format!("{mode}: node 33 off by {worst:e} pu"))?;
        ensure(post - pre > 0.05, || format!("{mode}: node 33 {pre:.5} -> {post:.5}, no rise"))?;
        tracked.push(format!("{mode} {compared} records within {worst:.1e} pu, node 33 {pre:.5}->{post:.5}"));
    }
    Ok(format!(
        "100 feeders within {worst_noisy:.1e} of normal equations, exact recovery {worst_exact:.1e}; {}",
        tracked.join("; ")
    ))
}

/// Bitwise CRC-16/CCITT-FALSE.
fn crc16(bytes: &[u8]) -> u16 {
    let mut crc = 0xFFFFu16;
    for &b in bytes {
        crc ^= (b as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

fn decoder_robustness() -> Outcome {
    let frame = PmuDataFrame {
        idcode: 31,
        timestamp: GpsTimestamp::from_micros(20_900_000),
        status: Status::OK,
        phasors: vec![Phasor::new(1.02, -0.05), Phasor::new(0.98, -2.1), Phasor::new(1.0, 2.1)],
        freq: 50.0,
        rocof: 0.0,
    };
    let reference = encode_frame(&frame).map_err(|e| e.to_string())?;
    ensure(reference.len() == 50, || format!("reference frame is {} B", reference.len()))?;
    let n = reference.len();
    let chk = u16::from_be_bytes([reference[n - 2], reference[n - 1]]);
    ensure(crc16(&reference[..n - 2]) == chk, || "reference checksum disagrees with bitwise CRC".into())?;
    ensure(decode_frame(&reference).is_ok(), || "reference frame rejected".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let mut buf = Vec::with_capacity(128);
    let (mut panics, mut accepted) = (0u64, 0u64);
    for i in 0..1_000_000u32 {
        buf.clear();
        if i % 2 == 0 {
            buf.resize(rng.random_range(0..120), 0);
            rng.fill_bytes(&mut buf);
        } else {
            buf.extend_from_slice(&reference);
            for _ in 0..rng.random_range(1..=4) {
                match rng.random_range(0..4) {
                    0 => {
                        let at = rng.random_range(0..buf.len());
                        buf[at] ^= 1 << rng.random_range(0..8);
                    }
                    1 => {
                        let at = rng.random_range(0..buf.len());
                        buf[at] = rng.random();
                    }
                    2 => buf.truncate(rng.random_range(0..buf.len())),
                    _ => buf.push(rng.random()),
                }
                if buf.is_empty() {
                    break;
                }
            }
        }
        match catch_unwind(AssertUnwindSafe(|| decode_frame(&buf).is_ok())) {
            Ok(true) => accepted += 1,
            Ok(false) => {}
            Err(_) => panics += 1,
        }
    }
    ensure(panics == 0, || format!("{panics} panics in 1e6 inputs"))?;

    let mut rejected = 0;
    for bit in 0..n * 8 {
        let mut flipped = reference.clone();
        flipped[bit / 8] ^= 0x80 >> (bit % 8);
        if decode_frame(&flipped).is_err() {
            rejected += 1;
        }
    }
    ensure(rejected == n * 8, || format!("{rejected} of {} single-bit flips rejected", n * 8))?;
    Ok(format!("1e6 inputs without panic ({accepted} accepted), {rejected}/{} bit flips rejected", n * 8))
}

fn timeliness_classes() -> Outcome {
    let mut c = ExperimentConfig::new(Mode::Fixed50);
    c.scenario = "steady:11".into();
    c.clock = ClockMode::Wall;
    let r = run(&c)?;
    let report = evaluate_tt_classes(&r.latencies).map_err(|e| e.to_string())?;
    let pct = |name| report.class(name).map(|c| c.dependability_pct).unwrap_or(f64::NAN);
    let (tt1, tt2) = (pct("TT1"), pct("TT2"));
    let compute = r.latencies.iter().map(|l| l.compute_ms()).fold(0.0, f64::max);
    let avg = report.classes[0].average_delay_ms;
    ensure(report.reports >= 1000, || format!("only {} reports", report.reports))?;
    ensure(tt1 == 100.0, || format!("TT1 {tt1:.2}%"))?;
    ensure(tt2 >= 99.0, || format!("TT2 {tt2:.2}%"))?;
    ensure(compute < 100.0, || format!("max compute {compute:.3} ms"))?;
    let audited = audit_alignment(&r.records).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} reports, TT1 {tt1:.1}%, TT2 {tt2:.1}%, mean {avg:.2} ms, max compute {compute:.3} ms, {audited} records audited",
        report.reports
    ))
}

fn alignment_audit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = ExperimentConfig::new(Mode::Fixed50);
    c.wan_jitter = "30ms".into();
    c.out = Some(dir.path().to_path_buf());
    let r = run(&c)?;
    ensure(r.reordered > 0, || "jitter produced no reordering".into())?;
    ensure(r.skipped == 0 && r.lost == 0, || format!("skipped {} lost {}", r.skipped, r.lost))?;
    let store = RecordStore::open(dir.path().join("records.log")).map_err(|e| e.to_string())?;
    ensure(store.records().len() == r.records.len(), || {
        format!("log holds {} of {} records", store.records().len(), r.records.len())
    })?;
    let audited = audit_alignment(store.records()).map_err(|e| e.to_string())?;
    Ok(format!("{} reordered arrivals, {audited} persisted records audited", r.reordered))
}

fn reference_regex(filter: &str) -> regex::Regex {
    let levels: Vec<&str> = filter.split('/').collect();
    let mut pattern = String::from("^");
    for (i, level) in levels.iter().enumerate() {
        let sep = if i == 0 { "" } else { "/" };
        match *level {
            "#" if i == 0 => pattern.push_str(".*"),
            "#" => pattern.push_str("(?:/.*)?"),
            "+" => pattern.push_str(&format!("{sep}[^/]*")),
            lit => pattern.push_str(&format!("{sep}{}", regex::escape(lit))),
        }
    }
    pattern.push('$');
    regex::Regex::new(&pattern).unwrap()
}

fn topic_matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70b1c);
    let words = ["grid", "area7", "der", "v", "", "x+y"];
    let mut matched = 0;
    for case in 0..10_000 {
        let depth = rng.random_range(1..=4);
        let mut topic: Vec<String> =
            (0..depth).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
        if rng.random_bool(0.1) {
            topic[0] = "$SYS".into();
        }
        let topic = topic.join("/");
        let fdepth = rng.random_range(1..=4);
        let mut filter: Vec<String> = (0..fdepth)
            .map(|_| match rng.random_range(0..6) {
                0 => "+".to_string(),
                _ => words[rng.random_range(0..words.len())].replace('+', "p"),
            })
            .collect();
        if rng.random_bool(0.3) {
            *filter.last_mut().unwrap() = "#".into();
        }
        if rng.random_bool(0.05) {
            filter[0] = "$SYS".into();
        }
        let filter = filter.join("/");
        if validate_filter(&filter).is_err() {
            ensure(filter.is_empty(), || format!("case {case}: valid filter `{filter}` refused"))?;
            continue;
        }
        let wildcard_first = filter.starts_with('+') || filter.starts_with('#');
        let want = !(wildcard_first && topic.starts_with('$')) && reference_regex(&filter).is_match(&topic);
        let got = topic_matches(&filter, &topic);
        ensure(got == want, || format!("case {case}: `{filter}` vs `{topic}`: got {got}, reference {want}"))?;
        matched += want as usize;
    }
    Ok(format!("10000 pairs agree with the regex reference ({matched} matches)"))
}
