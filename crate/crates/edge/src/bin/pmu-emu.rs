use std::fs::File;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use gridmesh_core::scenario::TruthSeries;
use gridmesh_edge::emulator::{stream, Pacing, PmuConfig};

/// Replay one node of a truth series to a VO as synchrophasor frames.
#[derive(Parser)]
#[command(name = "pmu-emu", version)]
struct Args {
    /// PMU config document.
    #[arg(long)]
    config: PathBuf,
    /// Truth series CSV (`time_s,node,vmag_pu,vangle_rad,freq_hz,rocof`).
    #[arg(long)]
    truth: PathBuf,
    /// Replay speed relative to real time, or `max`.
    #[arg(long, default_value = "1.0")]
    speed: Pacing,
    /// Override the VO address from the config.
    #[arg(long, env = "GRIDMESH_PMU_ENDPOINT")]
    endpoint: Option<String>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut config = PmuConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(ep) = args.endpoint {
        config.endpoint = ep;
    }
    let truth = TruthSeries::read_csv(File::open(&args.truth).with_context(|| format!("opening {}", args.truth.display()))?)?;
    let stats = stream(config, Arc::new(truth), args.speed).await?;
    println!("sent={} dropped={} connects={}", stats.sent, stats.dropped, stats.connects);
    Ok(())
}
