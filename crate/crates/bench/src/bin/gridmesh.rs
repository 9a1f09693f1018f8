use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gridmesh_bench::artifacts::{export_figures, write_artifacts};
use gridmesh_bench::{run_experiment, ClockMode, CloudMode, ExperimentConfig, Mode, PseudoMode};

#[derive(Parser)]
#[command(name = "gridmesh", about = "Run synchrophasor DSSE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// Build figure CSVs from finished run directories.
    Figures {
        /// Run directories (e.g. one adaptive and one fixed-50 run).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Node whose estimated trajectory is exported.
        #[arg(long, default_value_t = 33)]
        node: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment document; flags given here override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    /// One-way WAN delay on the VO to cloud path, e.g. `40ms`.
    #[arg(long)]
    wan_delay: Option<String>,
    #[arg(long)]
    wan_jitter: Option<String>,
    #[arg(long)]
    clock: Option<ClockMode>,
    /// Account reports without running the estimation service.
    #[arg(long)]
    ledger_only: bool,
    /// Constant per-frame size for the ledger.
    #[arg(long)]
    frame_bytes: Option<u64>,
    /// Disable PMU measurement noise.
    #[arg(long)]
    no_noise: bool,
    /// Use the scenario's actual loads as pseudomeasurements.
    #[arg(long)]
    truth_pseudos: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit nonzero when a run check fails.
    #[arg(long)]
    check: bool,
}

impl RunArgs {
    fn into_config(self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::new(self.mode.unwrap_or(Mode::Adaptive)),
        };
        if let Some(v) = self.model {
            c.model = v;
        }
        if let Some(v) = self.scenario {
            c.scenario = v;
        }
        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = self.wan_delay {
            c.wan_delay = v;
        }
        if let Some(v) = self.wan_jitter {
            c.wan_jitter = v;
        }
        if let Some(v) = self.clock {
            c.clock = v;
        }
        if self.ledger_only {
            c.cloud = CloudMode::LedgerOnly;
        }
        if let Some(v) = self.frame_bytes {
            c.frame_bytes = Some(v);
        }
        if self.no_noise {
            c.noise = false;
        }
        if self.truth_pseudos {
            c.pseudos = PseudoMode::Truth;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.speed {
            c.speed = v;
        }
        if let Some(v) = self.out {
            c.out = Some(v);
        }
        c.check |= self.check;
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.into_config()?;
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let mut cfg = cfg;
            cfg.out = Some(out.clone());
            let result = run_experiment(&cfg).context("running experiment")?;
            let summary = write_artifacts(&result, &out)?;
            print!("{}", summary.to_text());
            println!("artifacts in {}", out.display());
            Ok(if cfg.check && !summary.passed() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Figures { runs, node, out } => {
            for p in export_figures(&runs, node, &out)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
