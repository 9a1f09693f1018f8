use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use gridmesh_edge::server::{CommandHook, VoConfig, VoRuntime};

/// Run a Virtual Object: PMU ingest socket, GET /latest, and report POSTs.
#[derive(Parser)]
#[command(name = "vo", version)]
struct Args {
    /// VO config document; `GRIDMESH_VO_*` variables override its fields.
    #[arg(long)]
    config: PathBuf,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut config = VoConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    config.apply_env(|k| std::env::var(k).ok())?;
    let hook: CommandHook = Arc::new(|vo, cmd| {
        log::info!("{vo}: command on {}: {}", cmd.topic, serde_json::Value::Object(cmd.payload.clone()));
    });
    let rt = VoRuntime::start(config, Some(hook)).await?;
    log::info!("ingest on {}, http on {}", rt.ingest_addr, rt.http_addr);
    tokio::signal::ctrl_c().await?;
    let summary = rt.finish(Duration::from_secs(5)).await;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
