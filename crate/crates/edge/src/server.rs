//! Networked VO: a TCP ingest socket for PMU frames, a delivery queue that
//! POSTs reports northbound, and an HTTP endpoint serving the latest value.
//!
//! Ingest, policy and report construction run on one task that owns the
//! [`VirtualObject`]. Emitted reports are handed to a delivery task that runs
//! a bounded number of POSTs concurrently, so a slow endpoint never stalls
//! the policy.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use gridmesh_core::grid::NodeId;
use gridmesh_core::report::{ack_headers, Command, VoReport};
use gridmesh_core::time::GpsTimestamp;
use gridmesh_core::wire::{peek_frame_len, PmuDataFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncReadExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Semaphore};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::filter::{ChannelMap, FilterSpec};
use crate::policy::{PolicyConfig, RateChange};
use crate::vo::{VirtualObject, VoCounters, VoError, VoSettings};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Vo(#[from] VoError),
    #[error("malformed VO config: {0}")]
    Parse(String),
    #[error("environment override {name}: {message}")]
    Env { name: &'static str, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("http client: {0}")]
    Client(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushOptions {
    pub timeout_ms: u64,
    /// Attempts after the first before a report is counted lost.
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for PushOptions {
    fn default() -> Self {
        Self {
            timeout_ms: 2_000,
            retries: 3,
            backoff_ms: 50,
            max_in_flight: 64,
        }
    }
}

/// Injected one-way network delay, applied on the way out and on the way
/// back: `one_way_ms` plus a uniform jitter in `[-jitter_ms, jitter_ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WanDelay {
    pub one_way_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub seed: u64,
}

impl WanDelay {
    pub fn sample(&self, rng: &mut impl Rng) -> Duration {
        let j = if self.jitter_ms > 0.0 {
            rng.random_range(-self.jitter_ms..=self.jitter_ms)
        } else {
            0.0
        };
        Duration::from_secs_f64((self.one_way_ms + j).max(0.0) / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoConfig {
    pub vo_id: String,
    pub node: NodeId,
    /// Address the PMU connects to.
    pub ingest: String,
    /// Address of the GET endpoint.
    pub http: String,
    /// Northbound POST target; without one, reports are built but not sent.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub channels: Option<ChannelMap>,
    #[serde(default)]
    pub push: PushOptions,
    #[serde(default)]
    pub wan: Option<WanDelay>,
}

impl VoConfig {
    pub fn new(vo_id: impl Into<String>, node: NodeId) -> Self {
        Self {
            vo_id: vo_id.into(),
            node,
            ingest: "127.0.0.1:0".into(),
            http: "127.0.0.1:0".into(),
            endpoint: None,
            policy: PolicyConfig::default(),
            filter: FilterSpec::full(),
            channels: None,
            push: PushOptions::default(),
            wan: None,
        }
    }

    pub fn settings(&self) -> VoSettings {
        VoSettings {
            vo_id: self.vo_id.clone(),
            node: self.node,
            policy: self.policy.clone(),
            filter: self.filter.clone(),
            channels: self.channels.clone(),
        }
    }

    pub fn from_kv_str(text: &str) -> Result<Self, ServerError> {
        toml::from_str(text).map_err(|e| ServerError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServerError> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    /// Applies `GRIDMESH_VO_*` overrides from `lookup` (normally the process
    /// environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ServerError> {
        fn num<T: std::str::FromStr>(name: &'static str, v: &str) -> Result<T, ServerError> {
            v.parse().map_err(|_| ServerError::Env {
                name,
                message: format!("`{v}` is not a number"),
            })
        }
        if let Some(v) = lookup("GRIDMESH_VO_ENDPOINT") {
            self.endpoint = Some(v);
        }
        if let Some(v) = lookup("GRIDMESH_VO_INGEST") {
            self.ingest = v;
        }
        if let Some(v) = lookup("GRIDMESH_VO_HTTP") {
            self.http = v;
        }
        if let Some(v) = lookup("GRIDMESH_VO_RAISE_THRESHOLD") {
            self.policy.raise_threshold = num("GRIDMESH_VO_RAISE_THRESHOLD", &v)?;
        }
        if let Some(v) = lookup("GRIDMESH_VO_LOWER_THRESHOLD") {
            self.policy.lower_threshold = num("GRIDMESH_VO_LOWER_THRESHOLD", &v)?;
        }
        if let Some(v) = lookup("GRIDMESH_VO_LADDER") {
            self.policy.ladder = v
                .split(',')
                .map(|r| num("GRIDMESH_VO_LADDER", r.trim()))
                .collect::<Result<_, _>>()?;
        }
        if let Some(v) = lookup("GRIDMESH_VO_FIELDS") {
            let channels = self.filter.channels.take();
            self.filter = FilterSpec::parse_fields(&v).map_err(|e| ServerError::Env {
                name: "GRIDMESH_VO_FIELDS",
                message: e.to_string(),
            })?;
            self.filter.channels = channels;
        }
        Ok(())
    }
}

/// Service-side timing carried on a report acknowledgement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AckTiming {
    pub seq: Option<u64>,
    pub queue_ms: f64,
    pub solve_ms: f64,
    pub persist_ms: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliveryRecord {
    pub vo_id: String,
    pub ts: GpsTimestamp,
    pub rr: u32,
    pub body_bytes: usize,
    pub delivered: bool,
    pub attempts: u32,
    /// From the first attempt to the accepted reply, injected delay included.
    pub rtt_ms: f64,
    pub ack: Option<AckTiming>,
    pub command: Option<Command>,
    pub error: Option<String>,
}

pub type CommandHook = Arc<dyn Fn(&str, &Command) + Send + Sync>;

/// HTTP POST client for reports.
pub struct Pusher {
    client: reqwest::Client,
    endpoint: String,
    options: PushOptions,
    wan: Option<(WanDelay, Mutex<ChaCha8Rng>)>,
}

impl Pusher {
    pub fn new(endpoint: impl Into<String>, options: PushOptions, wan: Option<WanDelay>) -> Result<Self, ServerError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(options.timeout_ms))
            .build()
            .map_err(|e| ServerError::Client(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.into(),
            options,
            wan: wan.map(|w| (w, Mutex::new(ChaCha8Rng::seed_from_u64(w.seed)))),
        })
    }

    async fn wan_hop(&self) {
        if let Some((w, rng)) = &self.wan {
            let d = w.sample(&mut *rng.lock().expect("rng lock"));
            tokio::time::sleep(d).await;
        }
    }

    async fn attempt(&self, body: &[u8]) -> Result<(Option<AckTiming>, Option<Command>), String> {
        self.wan_hop().await;
        let resp = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let ack = parse_ack(resp.headers());
        let bytes = resp.bytes().await.map_err(|e| e.to_string())?;
        self.wan_hop().await;
        if !status.is_success() {
            return Err(format!("{status}: {}", String::from_utf8_lossy(&bytes)));
        }
        let command = if bytes.iter().all(u8::is_ascii_whitespace) {
            None
        } else {
            Some(serde_json::from_slice::<Command>(&bytes).map_err(|e| format!("reply is not a command: {e}"))?)
        };
        Ok((ack, command))
    }

    /// POSTs one report with bounded retries.
    pub async fn push(&self, report: &VoReport) -> DeliveryRecord {
        let body = report.to_json();
        let start = Instant::now();
        let mut attempts = 0;
        let mut last_error = None;
        while attempts <= self.options.retries {
            if attempts > 0 {
                tokio::time::sleep(Duration::from_millis(self.options.backoff_ms << (attempts - 1).min(6))).await;
            }
            attempts += 1;
            match self.attempt(&body).await {
                Ok((ack, command)) => {
                    return DeliveryRecord {
                        vo_id: report.vo_id.clone(),
                        ts: report.ts,
                        rr: report.rr,
                        body_bytes: body.len(),
                        delivered: true,
                        attempts,
                        rtt_ms: start.elapsed().as_secs_f64() * 1000.0,
                        ack,
                        command,
                        error: None,
                    }
                }
                Err(e) => last_error = Some(e),
            }
        }
        DeliveryRecord {
            vo_id: report.vo_id.clone(),
            ts: report.ts,
            rr: report.rr,
            body_bytes: body.len(),
            delivered: false,
            attempts,
            rtt_ms: start.elapsed().as_secs_f64() * 1000.0,
            ack: None,
            command: None,
            error: last_error,
        }
    }
}

fn parse_ack(headers: &reqwest::header::HeaderMap) -> Option<AckTiming> {
    let get = |name: &str| headers.get(name).and_then(|v| v.to_str().ok());
    let ms = |name: &str| get(name).and_then(|v| v.parse::<f64>().ok()).unwrap_or(0.0);
    let seq = get(ack_headers::SEQ).and_then(|v| v.parse().ok());
    let skipped = get(ack_headers::SKIPPED).is_some();
    if seq.is_none() && !skipped {
        return None;
    }
    Some(AckTiming {
        seq,
        queue_ms: ms(ack_headers::QUEUE_MS),
        solve_ms: ms(ack_headers::SOLVE_MS),
        persist_ms: ms(ack_headers::PERSIST_MS),
        skipped,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VoSummary {
    pub vo_id: String,
    pub counters: VoCounters,
    pub rate_trace: Vec<RateChange>,
    pub deliveries: Vec<DeliveryRecord>,
    pub lost: u64,
}

struct Snapshot {
    frame: PmuDataFrame,
    rr: u32,
}

struct Shared {
    settings: VoSettings,
    channels: ChannelMap,
    latest: RwLock<Option<Arc<Snapshot>>>,
    counters: RwLock<VoCounters>,
    trace: RwLock<Vec<RateChange>>,
    deliveries: Mutex<Vec<DeliveryRecord>>,
    lost: AtomicU64,
}

pub struct VoRuntime {
    pub ingest_addr: SocketAddr,
    pub http_addr: SocketAddr,
    shared: Arc<Shared>,
    listener: JoinHandle<()>,
    http: JoinHandle<()>,
    policy: JoinHandle<()>,
    delivery: JoinHandle<()>,
}

impl VoRuntime {
    /// Binds both sockets and starts the VO.
    pub async fn start(config: VoConfig, hook: Option<CommandHook>) -> Result<Self, ServerError> {
        let settings = config.settings();
        let mut vo = VirtualObject::new(settings.clone())?;
        let pusher = match &config.endpoint {
            Some(ep) => Some(Arc::new(Pusher::new(ep.clone(), config.push, config.wan)?)),
            None => None,
        };
        let shared = Arc::new(Shared {
            channels: settings.channel_map(),
            settings,
            latest: RwLock::new(None),
            counters: RwLock::new(VoCounters::default()),
            trace: RwLock::new(Vec::new()),
            deliveries: Mutex::new(Vec::new()),
            lost: AtomicU64::new(0),
        });

        let ingest = TcpListener::bind(&config.ingest).await?;
        let ingest_addr = ingest.local_addr()?;
        let http_listener = TcpListener::bind(&config.http).await?;
        let http_addr = http_listener.local_addr()?;

        let (frame_tx, mut frame_rx) = mpsc::channel::<Vec<u8>>(1024);
        let listener = tokio::spawn(async move {
            let mut readers = Vec::new();
            while let Ok((sock, peer)) = ingest.accept().await {
                log::debug!("pmu connected from {peer}");
                readers.push(tokio::spawn(read_frames(sock, frame_tx.clone())));
            }
        });

        let (report_tx, mut report_rx) = mpsc::unbounded_channel::<VoReport>();
        let policy_shared = shared.clone();
        let forward = pusher.is_some();
        let policy = tokio::spawn(async move {
            while let Some(bytes) = frame_rx.recv().await {
                let report = vo.on_bytes(&bytes).ok().flatten();
                if let Some(frame) = vo.latest_frame() {
                    let snap = Arc::new(Snapshot {
                        frame: frame.clone(),
                        rr: vo.policy().current_rr(),
                    });
                    *policy_shared.latest.write().expect("latest lock") = Some(snap);
                }
                *policy_shared.counters.write().expect("counters lock") = vo.counters();
                let trace = vo.rate_trace();
                {
                    let mut t = policy_shared.trace.write().expect("trace lock");
                    if t.len() != trace.len() {
                        *t = trace.to_vec();
                    }
                }
                if let (Some(r), true) = (report, forward) {
                    report_tx.send(r).ok();
                }
            }
        });

        let delivery_shared = shared.clone();
        let max_in_flight = config.push.max_in_flight.max(1);
        let delivery = tokio::spawn(async move {
            let Some(pusher) = pusher else { return };
            let permits = Arc::new(Semaphore::new(max_in_flight));
            while let Some(report) = report_rx.recv().await {
                let permit = permits.clone().acquire_owned().await.expect("semaphore open");
                let pusher = pusher.clone();
                let shared = delivery_shared.clone();
                let hook = hook.clone();
                tokio::spawn(async move {
                    let record = pusher.push(&report).await;
                    if !record.delivered {
                        shared.lost.fetch_add(1, Ordering::Relaxed);
                        log::warn!("{}: report {} lost: {:?}", record.vo_id, record.ts, record.error);
                    }
                    if let (Some(cmd), Some(hook)) = (&record.command, &hook) {
                        hook(&record.vo_id, cmd);
                    }
                    shared.deliveries.lock().expect("deliveries lock").push(record);
                    drop(permit);
                });
            }
            permits.acquire_many(max_in_flight as u32).await.ok();
        });

        let app = Router::new()
            .route("/latest", get(get_latest))
            .route("/stats", get(get_stats))
            .with_state(shared.clone());
        let http = tokio::spawn(async move {
            axum::serve(http_listener, app).await.ok();
        });

        Ok(Self {
            ingest_addr,
            http_addr,
            shared,
            listener,
            http,
            policy,
            delivery,
        })
    }

    pub fn lost(&self) -> u64 {
        self.shared.lost.load(Ordering::Relaxed)
    }

    pub fn counters(&self) -> VoCounters {
        *self.shared.counters.read().expect("counters lock")
    }

    /// Stops accepting PMUs, drains queued frames and in-flight deliveries,
    /// and returns what happened. Connected PMUs must have closed their
    /// streams, or their remaining frames are discarded after `grace`.
    pub async fn finish(self, grace: Duration) -> VoSummary {
        self.listener.abort();
        let _ = self.listener.await;
        let drained = tokio::time::timeout(grace, async {
            let _ = self.policy.await;
            let _ = self.delivery.await;
        })
        .await;
        if drained.is_err() {
            log::warn!("{}: shutdown grace period expired", self.shared.settings.vo_id);
        }
        self.http.abort();
        let mut deliveries = std::mem::take(&mut *self.shared.deliveries.lock().expect("deliveries lock"));
        deliveries.sort_by_key(|d| d.ts);
        VoSummary {
            vo_id: self.shared.settings.vo_id.clone(),
            counters: *self.shared.counters.read().expect("counters lock"),
            rate_trace: self.shared.trace.read().expect("trace lock").clone(),
            deliveries,
            lost: self.shared.lost.load(Ordering::Relaxed),
        }
    }
}

async fn read_frames(mut sock: TcpStream, tx: mpsc::Sender<Vec<u8>>) {
    let mut buf: Vec<u8> = Vec::with_capacity(4096);
    let mut chunk = [0u8; 4096];
    loop {
        loop {
            match peek_frame_len(&buf) {
                Ok(Some(len)) if buf.len() >= len => {
                    let frame: Vec<u8> = buf.drain(..len).collect();
                    if tx.send(frame).await.is_err() {
                        return;
                    }
                }
                Ok(_) => break,
                Err(_) => {
                    // Lost framing: skip a byte and look for the next sync word.
                    buf.remove(0);
                }
            }
        }
        match sock.read(&mut chunk).await {
            Ok(0) | Err(_) => return,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
        }
    }
}

#[derive(Debug, Deserialize)]
struct LatestQuery {
    fields: Option<String>,
    channels: Option<String>,
}

async fn get_latest(State(shared): State<Arc<Shared>>, Query(q): Query<LatestQuery>) -> Response {
    let mut spec = match q.fields.as_deref() {
        Some(f) => match FilterSpec::parse_fields(f) {
            Ok(s) => s,
            Err(e) => return (StatusCode::BAD_REQUEST, Json(HashMap::from([("error", e.to_string())]))).into_response(),
        },
        None => FilterSpec::full(),
    };
    if let Some(c) = q.channels.as_deref() {
        spec = spec.with_channels(c.split(',').map(str::trim).filter(|s| !s.is_empty()));
        if let Err(e) = spec.check_channels(&shared.channels) {
            return (StatusCode::BAD_REQUEST, Json(HashMap::from([("error", e.to_string())]))).into_response();
        }
    }
    let snap = shared.latest.read().expect("latest lock").clone();
    match snap {
        Some(s) => {
            let r = crate::filter::filter_report(&s.frame, &shared.channels, &spec, &shared.settings.vo_id, s.rr);
            Json(r).into_response()
        }
        None => (StatusCode::NOT_FOUND, Json(HashMap::from([("status", "no-data")]))).into_response(),
    }
}

async fn get_stats(State(shared): State<Arc<Shared>>) -> Response {
    let counters = *shared.counters.read().expect("counters lock");
    let rr = shared.latest.read().expect("latest lock").as_ref().map(|s| s.rr);
    Json(serde_json::json!({
        "vo_id": shared.settings.vo_id,
        "rr": rr,
        "counters": counters,
        "lost": shared.lost.load(Ordering::Relaxed),
    }))
    .into_response()
}
