use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use gridmesh_core::clock::WallClock;
use gridmesh_dsse::broker::{spawn_tcp, Broker};
use gridmesh_dsse::{DsseConfig, DsseService};

/// DSSE service: POST /report, GET /results, GET /health.
#[derive(Parser)]
struct Args {
    /// Service configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `listen` from the configuration.
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    /// Overrides `records` from the configuration.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(p) => DsseConfig::load(p)?,
        None => DsseConfig::default(),
    };
    if let Some(l) = args.listen {
        cfg.listen = l;
    }
    if let Some(r) = args.records {
        cfg.records = Some(r);
    }
    let broker = Broker::new();
    let core = cfg.build_core(Arc::new(WallClock::new()))?.with_broker(broker.clone());
    let service = DsseService::start(core, cfg.queue_depth);
    let _redelivery = broker.spawn_redelivery(std::time::Duration::from_secs(1));
    if let Some(addr) = cfg.broker {
        let (bound, _task) = spawn_tcp(addr, broker.clone()).await.context("binding broker")?;
        log::info!("broker listening on {bound}");
    }
    let listener = tokio::net::TcpListener::bind(cfg.listen).await.context("binding http")?;
    log::info!("dsse listening on {}", listener.local_addr()?);
    service
        .serve(listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    let svc = service.clone();
    tokio::task::spawn_blocking(move || svc.shutdown()).await?;
    log::info!("dsse stopped after {} skipped triggers", service.skipped());
    Ok(())
}
