//! Pipeline wiring for one experiment under either clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context;
use gridmesh_core::clock::{Clock, VirtualClock, WallClock};
use gridmesh_core::grid::{GridModel, NodeId};
use gridmesh_core::report::VoReport;
use gridmesh_core::scenario::{run_scenario, ScenarioScript, TruthSeries};
use gridmesh_core::time::GpsTimestamp;
use gridmesh_core::wire::{encode_frame, frame_size};
use gridmesh_dsse::registry::{vo_id_for, Registry};
use gridmesh_dsse::store::{EstimationRecord, RecordStore};
use gridmesh_dsse::{DsseCore, DsseService, EngineConfig, Estimator, PseudoSource};
use gridmesh_edge::emulator::{stream, FrameSource, NoiseModel, Pacing, PmuConfig};
use gridmesh_edge::policy::RateChange;
use gridmesh_edge::server::{VoConfig, VoRuntime, WanDelay};
use gridmesh_edge::vo::{VirtualObject, VoCounters, VoSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::experiment::{ClockMode, CloudMode, ExperimentConfig, PseudoMode};
use crate::latency::LatencyRecord;
use crate::ledger::{Link, LoadLedger, SizeSource};

/// A report as it left a VO: enough to plot what the cloud was sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedPoint {
    pub vo_id: String,
    pub node: NodeId,
    pub ts_s: f64,
    pub rr: u32,
    pub vmag_pu: f64,
    pub vangle_rad: f64,
}

/// Everything a run produced, before it is written out.
pub struct RunResult {
    pub config: ExperimentConfig,
    pub model: GridModel,
    pub truth: Arc<TruthSeries>,
    pub ledger: LoadLedger,
    pub latencies: Vec<LatencyRecord>,
    pub records: Vec<EstimationRecord>,
    pub emitted: Vec<EmittedPoint>,
    pub rate_traces: BTreeMap<String, Vec<RateChange>>,
    pub vo_counters: BTreeMap<String, VoCounters>,
    /// Reports that reached the service after a later-stamped one.
    pub reordered: u64,
    pub skipped: u64,
    pub lost: u64,
    pub runtime_s: f64,
}

impl RunResult {
    pub fn pmus(&self) -> usize {
        self.model.pmu_nodes().len()
    }

    /// Mean vo→cloud frames per second per PMU.
    pub fn average_cloud_rate(&self) -> f64 {
        self.ledger.average_rate_per_source(Link::VoToCloud, self.pmus())
    }

    pub fn estimation_errors(&self) -> usize {
        self.records.iter().filter(|r| !r.is_estimate()).count()
    }
}

struct Inputs {
    model: GridModel,
    script: ScenarioScript,
    truth: Arc<TruthSeries>,
}

fn inputs(cfg: &ExperimentConfig) -> anyhow::Result<Inputs> {
    let model = cfg.grid_model()?;
    let script = cfg.scenario_script()?;
    if model.pmu_nodes().is_empty() {
        anyhow::bail!("model `{}` has no PMU nodes", model.name());
    }
    let truth = Arc::new(run_scenario(&model, &script).context("running scenario")?);
    Ok(Inputs { model, script, truth })
}

fn pmu_config(cfg: &ExperimentConfig, node: NodeId, endpoint: String) -> PmuConfig {
    let mut p = PmuConfig::new(node, endpoint);
    p.noise = if cfg.noise { NoiseModel::default() } else { NoiseModel::NONE };
    p.seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(node as u64);
    p
}

fn wan(cfg: &ExperimentConfig, index: usize) -> WanDelay {
    WanDelay {
        one_way_ms: cfg.wan_delay_ms().expect("validated"),
        jitter_ms: cfg.wan_jitter_ms().expect("validated"),
        seed: cfg.seed.wrapping_add(0x5eed_0000 + index as u64),
    }
}

fn ledger_for(cfg: &ExperimentConfig, truth: &TruthSeries) -> LoadLedger {
    let size = cfg.frame_bytes.map_or(SizeSource::Measured, SizeSource::Fixed);
    LoadLedger::new(size, GpsTimestamp::from_micros(truth.epoch_us()), truth.tick_count() * truth.period_us())
}

fn core(cfg: &ExperimentConfig, inp: &Inputs, clock: Arc<dyn Clock>, store: RecordStore) -> DsseCore {
    let pseudo = match cfg.pseudos {
        PseudoMode::Forecast => PseudoSource::Forecast(inp.model.loads()),
        PseudoMode::Truth => PseudoSource::Scenario(inp.script.clone()),
    };
    let engine = EngineConfig {
        horizon_s: cfg.horizon_s,
        ..EngineConfig::default()
    };
    let est = Estimator::new(inp.model.clone(), pseudo, engine);
    DsseCore::new(Registry::from_model(&inp.model), est, store, clock)
}

fn record_store(cfg: &ExperimentConfig) -> anyhow::Result<RecordStore> {
    match &cfg.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("records.log");
            if path.exists() {
                std::fs::remove_file(&path)?;
            }
            Ok(RecordStore::open(path)?)
        }
        None => Ok(RecordStore::in_memory()),
    }
}

fn emitted_point(report: &VoReport, node: NodeId) -> Option<EmittedPoint> {
    let v = report.phasors.get(&format!("V{node}"))?;
    Some(EmittedPoint {
        vo_id: report.vo_id.clone(),
        node,
        ts_s: report.ts.as_secs_f64(),
        rr: report.rr,
        vmag_pu: v.magnitude,
        vangle_rad: v.angle,
    })
}

/// Runs the experiment described by `cfg` to completion.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<RunResult> {
    cfg.validate()?;
    match cfg.clock {
        ClockMode::Virtual => run_virtual(cfg),
        ClockMode::Wall => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            // Dropping the runtime tears down every spawned component.
            rt.block_on(run_wall(cfg))
        }
    }
}

struct InFlight {
    arrival_us: u64,
    report: VoReport,
    vo_index: usize,
}

/// Discrete-event run: frames are produced per PMU, pass through the VO
/// policy, and reports reach the service in WAN-delayed arrival order.
pub fn run_virtual(cfg: &ExperimentConfig) -> anyhow::Result<RunResult> {
    let started = Instant::now();
    let inp = inputs(cfg)?;
    let mut ledger = ledger_for(cfg, &inp.truth);
    let full = cfg.cloud == CloudMode::Full;
    let mut flights: Vec<InFlight> = Vec::new();
    let mut emitted = Vec::new();
    let mut rate_traces = BTreeMap::new();
    let mut vo_counters = BTreeMap::new();
    let mut wans = Vec::new();
    let frame_bytes = frame_size(3) as u64;

    for (index, &node) in inp.model.pmu_nodes().iter().enumerate() {
        let vo_id = vo_id_for(node);
        let mut settings = VoSettings::new(&vo_id, node);
        settings.policy = cfg.mode.policy();
        settings.filter = cfg.mode.filter(node);
        let mut vo = VirtualObject::new(settings)?;
        let delay = wan(cfg, index);
        let mut rng = ChaCha8Rng::seed_from_u64(delay.seed);
        for frame in FrameSource::new(pmu_config(cfg, node, "virtual".into()), inp.truth.clone())? {
            let ts = frame.timestamp;
            let report = if full || ledger.fixed_size().is_none() {
                let bytes = encode_frame(&frame)?;
                ledger.account(Link::PmuToVo, &vo_id, bytes.len() as u64, ts)?;
                vo.on_bytes(&bytes)?
            } else {
                ledger.account(Link::PmuToVo, &vo_id, frame_bytes, ts)?;
                vo.on_frame(frame)
            };
            let Some(report) = report else { continue };
            let size = match ledger.fixed_size() {
                Some(b) => b,
                None => report.encoded_len() as u64,
            };
            ledger.account(Link::VoToCloud, &vo_id, size, ts)?;
            if full {
                emitted.extend(emitted_point(&report, node));
                let up = delay.sample(&mut rng).as_micros() as u64;
                flights.push(InFlight {
                    arrival_us: ts.as_micros() + up,
                    report,
                    vo_index: index,
                });
            }
        }
        rate_traces.insert(vo_id.clone(), vo.rate_trace().to_vec());
        vo_counters.insert(vo_id, vo.counters());
        wans.push((delay, rng));
    }

    let mut latencies = Vec::new();
    let mut records = Vec::new();
    let mut reordered = 0;
    if full {
        let clock = VirtualClock::new();
        let mut c = core(cfg, &inp, Arc::new(clock.clone()), record_store(cfg)?);
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
            flights.iter().enumerate().map(|(i, f)| Reverse((f.arrival_us, i))).collect();
        let mut newest = GpsTimestamp::from_micros(0);
        while let Some(Reverse((arrival, i))) = heap.pop() {
            let f = &flights[i];
            clock.advance_to(arrival);
            if f.report.ts < newest {
                reordered += 1;
            }
            newest = newest.max(f.report.ts);
            let ack = c.process(&f.report, arrival)?;
            let (delay, rng) = &mut wans[f.vo_index];
            let down = delay.sample(rng).as_micros() as u64;
            let rtt_ms = (arrival - f.report.ts.as_micros() + down) as f64 / 1000.0 + ack.queue_ms + ack.solve_ms + ack.persist_ms;
            latencies.push(LatencyRecord::from_round_trip(
                &f.report.vo_id,
                f.report.ts.as_secs_f64(),
                f.report.rr,
                delay.one_way_ms,
                rtt_ms,
                [ack.queue_ms, ack.solve_ms, ack.persist_ms],
            ));
        }
        c.store_mut().flush()?;
        records = c.store().records().to_vec();
    }

    Ok(RunResult {
        config: cfg.clone(),
        model: inp.model,
        truth: inp.truth,
        ledger,
        latencies,
        records,
        emitted,
        rate_traces,
        vo_counters,
        reordered,
        skipped: 0,
        lost: 0,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// Loopback run on real sockets: PMU emulators stream to VO runtimes, which
/// push through the injected WAN delay to the HTTP service.
pub async fn run_wall(cfg: &ExperimentConfig) -> anyhow::Result<RunResult> {
    let started = Instant::now();
    let inp = inputs(cfg)?;
    let mut ledger = ledger_for(cfg, &inp.truth);
    let svc = DsseService::start(core(cfg, &inp, Arc::new(WallClock::new()), record_store(cfg)?), cfg.queue_depth);
    let (addr, server) = svc.spawn("127.0.0.1:0".parse()?).await.context("starting dsse service")?;

    let mut vos = Vec::new();
    let mut streams = Vec::new();
    for (index, &node) in inp.model.pmu_nodes().iter().enumerate() {
        let mut vc = VoConfig::new(vo_id_for(node), node);
        vc.endpoint = Some(format!("http://{addr}/report"));
        vc.policy = cfg.mode.policy();
        vc.filter = cfg.mode.filter(node);
        vc.wan = Some(wan(cfg, index));
        let vo = VoRuntime::start(vc, None).await.context("starting VO")?;
        let pmu = pmu_config(cfg, node, vo.ingest_addr.to_string());
        let truth = inp.truth.clone();
        let pacing = Pacing::RealTime { speed: cfg.speed };
        streams.push(tokio::spawn(async move { stream(pmu, truth, pacing).await }));
        vos.push((node, vo));
    }
    for s in streams {
        let stats = s.await.context("pmu task")??;
        if stats.dropped > 0 {
            log::warn!("pmu dropped {} frames", stats.dropped);
        }
    }

    let mut latencies = Vec::new();
    let mut rate_traces = BTreeMap::new();
    let mut vo_counters = BTreeMap::new();
    let mut lost = 0;
    let frame_bytes = frame_size(3) as u64;
    for (node, vo) in vos {
        let summary = vo.finish(Duration::from_secs(10)).await;
        // The VO counts frames but not which ones; emulators send in tick
        // order, so the received frames are the leading ticks.
        for tick in 0..summary.counters.frames_in.min(inp.truth.tick_count()) {
            ledger.account(Link::PmuToVo, &summary.vo_id, frame_bytes, inp.truth.timestamp(tick))?;
        }
        for d in &summary.deliveries {
            ledger.account(Link::VoToCloud, &summary.vo_id, d.body_bytes as u64, d.ts)?;
            let Some(ack) = d.ack.filter(|a| d.delivered && !a.skipped) else { continue };
            latencies.push(LatencyRecord::from_round_trip(
                &summary.vo_id,
                d.ts.as_secs_f64(),
                d.rr,
                cfg.wan_delay_ms().expect("validated"),
                d.rtt_ms,
                [ack.queue_ms, ack.solve_ms, ack.persist_ms],
            ));
        }
        lost += summary.lost;
        debug_assert_eq!(vo_id_for(node), summary.vo_id);
        rate_traces.insert(summary.vo_id.clone(), summary.rate_trace);
        vo_counters.insert(summary.vo_id, summary.counters);
    }

    server.stop().await;
    let s = svc.clone();
    tokio::task::spawn_blocking(move || s.shutdown()).await?;
    let records = svc.with_core(|c| c.store().records().to_vec());

    Ok(RunResult {
        config: cfg.clone(),
        model: inp.model,
        truth: inp.truth,
        ledger,
        latencies,
        records,
        emitted: Vec::new(),
        rate_traces,
        vo_counters,
        reordered: 0,
        skipped: svc.skipped(),
        lost,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}
