//! HTTP front end and the estimation worker.
//!
//! Requests are validated on the HTTP tasks and queued for one worker thread
//! that owns estimation. When more than `queue_depth` estimation jobs wait,
//! the oldest one is demoted to buffer-only and acknowledged as skipped, so
//! the estimate always reflects the newest reports.

use std::collections::{BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gridmesh_core::clock::Clock;
use gridmesh_core::grid::NodeId;
use gridmesh_core::report::{ack_headers, VoReport};
use gridmesh_core::time::GpsTimestamp;
use serde::Deserialize;
use tokio::sync::oneshot;

use crate::engine::{Ack, DsseCore, IngestError};
use crate::registry::Registry;
use crate::store::write_projections_csv;

pub const DEFAULT_QUEUE_DEPTH: usize = 64;

#[derive(Debug)]
pub enum JobOutcome {
    Acked(Ack),
    Skipped,
}

struct Job {
    report: VoReport,
    received_us: u64,
    estimate: bool,
    reply: Option<oneshot::Sender<Result<JobOutcome, IngestError>>>,
}

#[derive(Default)]
struct Queue {
    jobs: VecDeque<Job>,
    closed: bool,
}

struct Shared {
    core: Mutex<DsseCore>,
    registry: Registry,
    queue: Mutex<Queue>,
    ready: Condvar,
    depth: usize,
    skipped: AtomicU64,
    rejected: AtomicU64,
    clock: Arc<dyn Clock>,
}

/// Cheap cloneable handle to a running service.
#[derive(Clone)]
pub struct DsseService {
    shared: Arc<Shared>,
    worker: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl DsseService {
    pub fn start(core: DsseCore, queue_depth: usize) -> Self {
        let shared = Arc::new(Shared {
            registry: core.registry().clone(),
            clock: core.clock().clone(),
            core: Mutex::new(core),
            queue: Mutex::new(Queue::default()),
            ready: Condvar::new(),
            depth: queue_depth.max(1),
            skipped: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        });
        let worker_shared = shared.clone();
        let worker = std::thread::Builder::new()
            .name("dsse-estimator".into())
            .spawn(move || run_worker(&worker_shared))
            .expect("spawn estimation worker");
        Self {
            shared,
            worker: Arc::new(Mutex::new(Some(worker))),
        }
    }

    /// Queues a report. The receiver yields once the worker has handled it.
    pub fn submit(&self, report: VoReport) -> oneshot::Receiver<Result<JobOutcome, IngestError>> {
        let (tx, rx) = oneshot::channel();
        let received_us = self.shared.clock.now_micros();
        let mut q = self.shared.queue.lock().unwrap();
        let waiting = q.jobs.iter().filter(|j| j.estimate).count();
        if waiting >= self.shared.depth {
            if let Some(oldest) = q.jobs.iter_mut().find(|j| j.estimate) {
                oldest.estimate = false;
                self.shared.skipped.fetch_add(1, Ordering::Relaxed);
                if let Some(reply) = oldest.reply.take() {
                    let _ = reply.send(Ok(JobOutcome::Skipped));
                }
            }
        }
        q.jobs.push_back(Job {
            report,
            received_us,
            estimate: true,
            reply: Some(tx),
        });
        drop(q);
        self.shared.ready.notify_one();
        rx
    }

    /// Runs `f` with exclusive access to the core (blocks the worker).
    pub fn with_core<T>(&self, f: impl FnOnce(&mut DsseCore) -> T) -> T {
        f(&mut self.shared.core.lock().unwrap())
    }

    pub fn skipped(&self) -> u64 {
        self.shared.skipped.load(Ordering::Relaxed)
    }

    pub fn queue_len(&self) -> usize {
        self.shared.queue.lock().unwrap().jobs.len()
    }

    /// Drains the queue, stops the worker and flushes the record log.
    pub fn shutdown(&self) {
        self.shared.queue.lock().unwrap().closed = true;
        self.shared.ready.notify_all();
        if let Some(w) = self.worker.lock().unwrap().take() {
            let _ = w.join();
        }
        if let Err(e) = self.shared.core.lock().unwrap().store_mut().flush() {
            log::error!("flushing records: {e}");
        }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/report", post(post_report))
            .route("/results", get(get_results))
            .route("/health", get(get_health))
            .with_state(self.clone())
    }

    /// Binds `addr` and serves until `shutdown` resolves.
    pub async fn serve(
        &self,
        listener: tokio::net::TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await
    }

    /// Serves in the background on `addr`; returns the bound address.
    pub async fn spawn(&self, addr: SocketAddr) -> std::io::Result<(SocketAddr, ServerHandle)> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let svc = self.clone();
        let task = tokio::spawn(async move {
            if let Err(e) = svc
                .serve(listener, async {
                    let _ = rx.await;
                })
                .await
            {
                log::error!("dsse http server: {e}");
            }
        });
        Ok((local, ServerHandle { stop: Some(tx), task }))
    }
}

pub struct ServerHandle {
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl ServerHandle {
    pub async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

fn run_worker(shared: &Shared) {
    loop {
        let job = {
            let mut q = shared.queue.lock().unwrap();
            loop {
                if let Some(job) = q.jobs.pop_front() {
                    break job;
                }
                if q.closed {
                    return;
                }
                q = shared.ready.wait(q).unwrap();
            }
        };
        let mut core = shared.core.lock().unwrap();
        let result = if job.estimate {
            core.process(&job.report, job.received_us).map(JobOutcome::Acked)
        } else {
            core.buffer_only(&job.report).map(|()| JobOutcome::Skipped)
        };
        drop(core);
        if let Err(e) = &result {
            log::warn!("report from {}: {e}", job.report.vo_id);
        }
        if let Some(reply) = job.reply {
            let _ = reply.send(result);
        }
    }
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(serde_json::json!({ "error": message.to_string() }))).into_response()
}

fn header(v: impl ToString) -> HeaderValue {
    HeaderValue::from_str(&v.to_string()).expect("numeric header")
}

async fn post_report(State(svc): State<DsseService>, body: Bytes) -> Response {
    let report = match VoReport::from_json(&body) {
        Ok(r) => r,
        Err(e) => {
            svc.shared.rejected.fetch_add(1, Ordering::Relaxed);
            return error(StatusCode::BAD_REQUEST, e);
        }
    };
    let Some(reg) = svc.shared.registry.get(&report.vo_id) else {
        svc.shared.rejected.fetch_add(1, Ordering::Relaxed);
        return error(StatusCode::NOT_FOUND, IngestError::UnknownVo(report.vo_id.clone()));
    };
    if !report.phasors.contains_key(&reg.channel()) {
        svc.shared.rejected.fetch_add(1, Ordering::Relaxed);
        let e = IngestError::MissingChannel {
            vo: report.vo_id.clone(),
            channel: reg.channel(),
        };
        return error(StatusCode::UNPROCESSABLE_ENTITY, e);
    }
    let outcome = match svc.submit(report).await {
        Ok(r) => r,
        Err(_) => return error(StatusCode::SERVICE_UNAVAILABLE, "estimator stopped"),
    };
    let mut headers = HeaderMap::new();
    match outcome {
        Ok(JobOutcome::Skipped) => {
            headers.insert(ack_headers::SKIPPED, header(1));
            (StatusCode::OK, headers).into_response()
        }
        Ok(JobOutcome::Acked(ack)) => {
            headers.insert(ack_headers::SEQ, header(ack.seq));
            headers.insert(ack_headers::QUEUE_MS, header(ack.queue_ms));
            headers.insert(ack_headers::SOLVE_MS, header(ack.solve_ms));
            headers.insert(ack_headers::PERSIST_MS, header(ack.persist_ms));
            match ack.command {
                Some(cmd) => (StatusCode::OK, headers, Json(cmd)).into_response(),
                None => (StatusCode::OK, headers).into_response(),
            }
        }
        Err(e @ (IngestError::Malformed(_) | IngestError::MissingChannel { .. })) => {
            error(StatusCode::UNPROCESSABLE_ENTITY, e)
        }
        Err(e @ IngestError::UnknownVo(_)) => error(StatusCode::NOT_FOUND, e),
        Err(e @ IngestError::Store(_)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

#[derive(Debug, Deserialize)]
struct ResultsQuery {
    /// Seconds since the epoch, inclusive.
    from: Option<f64>,
    to: Option<f64>,
    /// Comma-separated node ids.
    nodes: Option<String>,
    format: Option<String>,
}

fn seconds(s: f64) -> GpsTimestamp {
    GpsTimestamp::from_micros((s.max(0.0) * 1e6).round() as u64)
}

async fn get_results(State(svc): State<DsseService>, Query(q): Query<ResultsQuery>) -> Response {
    let nodes: Option<BTreeSet<NodeId>> = match &q.nodes {
        None => None,
        Some(list) => match list.split(',').map(|n| n.trim().parse()).collect() {
            Ok(set) => Some(set),
            Err(_) => return error(StatusCode::BAD_REQUEST, format!("bad node list `{list}`")),
        },
    };
    let from = seconds(q.from.unwrap_or(0.0));
    let to = q.to.map_or(GpsTimestamp::from_micros(u32::MAX as u64 * 1_000_000), seconds);
    let rows = svc.with_core(|c| c.store().query(from, to, nodes.as_ref()));
    match q.format.as_deref() {
        None | Some("json") => Json(rows).into_response(),
        Some("csv") => {
            let mut buf = Vec::new();
            if let Err(e) = write_projections_csv(&rows, &mut buf) {
                return error(StatusCode::INTERNAL_SERVER_ERROR, e);
            }
            ([("content-type", "text/csv")], buf).into_response()
        }
        Some(other) => error(StatusCode::BAD_REQUEST, format!("unknown format `{other}`")),
    }
}

async fn get_health(State(svc): State<DsseService>) -> Response {
    let records = svc.with_core(|c| c.store().len());
    Json(serde_json::json!({
        "status": "ok",
        "records": records,
        "queue": svc.queue_len(),
        "skipped": svc.skipped(),
        "rejected": svc.shared.rejected.load(Ordering::Relaxed),
    }))
    .into_response()
}
