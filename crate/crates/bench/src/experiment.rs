//! Experiment documents and their resolution into concrete inputs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use gridmesh_core::grid::GridModel;
use gridmesh_core::scenario::ScenarioScript;
use gridmesh_edge::filter::FilterSpec;
use gridmesh_edge::policy::PolicyConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fixed-50")]
    Fixed50,
    #[serde(rename = "adaptive")]
    Adaptive,
    #[serde(rename = "adaptive+filtered")]
    AdaptiveFiltered,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fixed50 => "fixed-50",
            Mode::Adaptive => "adaptive",
            Mode::AdaptiveFiltered => "adaptive+filtered",
        }
    }

    pub fn policy(self) -> PolicyConfig {
        match self {
            Mode::Fixed50 => PolicyConfig::fixed(50),
            Mode::Adaptive | Mode::AdaptiveFiltered => PolicyConfig::default(),
        }
    }

    /// Report members; the filtered mode keeps only the positive-sequence
    /// voltage the estimator consumes.
    pub fn filter(self, node: u32) -> FilterSpec {
        match self {
            Mode::Fixed50 | Mode::Adaptive => FilterSpec::full(),
            Mode::AdaptiveFiltered => FilterSpec::phasors_only().with_channels([format!("V{node}")]),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed-50" => Ok(Mode::Fixed50),
            "adaptive" => Ok(Mode::Adaptive),
            "adaptive+filtered" => Ok(Mode::AdaptiveFiltered),
            _ => Err(format!("unknown mode `{s}` (fixed-50, adaptive, adaptive+filtered)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Discrete-event simulation; service timings read zero.
    #[default]
    Virtual,
    /// Real sockets, real pacing, measured latency.
    Wall,
}

impl FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "virtual" => Ok(ClockMode::Virtual),
            "wall" => Ok(ClockMode::Wall),
            _ => Err(format!("unknown clock `{s}` (virtual, wall)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudMode {
    /// Reports reach the estimation service.
    #[default]
    Full,
    /// Reports are only accounted; for long bandwidth runs.
    LedgerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoMode {
    /// The model's base loads.
    #[default]
    Forecast,
    /// The scenario's actual loads at each trigger time.
    Truth,
}

/// Parses `40ms`, `0.5s` or a bare number of milliseconds.
pub fn parse_ms(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return if v >= 0.0 && v.is_finite() { Ok(v) } else { Err(format!("`{s}` is not a valid delay")) };
    }
    if let Some(v) = s.strip_suffix("ms").and_then(|v| v.trim().parse::<f64>().ok()) {
        if v >= 0.0 && v.is_finite() {
            return Ok(v);
        }
    }
    humantime::parse_duration(s)
        .map(|d| d.as_secs_f64() * 1000.0)
        .map_err(|e| format!("`{s}`: {e}"))
}

/// One run of the pipeline. Every CLI flag has a field here.
///
/// `model` is a file path or `ieee13-balanced`; `scenario` is a file path,
/// `der-insertion` or `steady:<seconds>`. A path that does not exist but
/// whose file stem names a bundled input resolves to the bundled one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_scenario")]
    pub scenario: String,
    pub mode: Mode,
    #[serde(default = "default_wan_delay")]
    pub wan_delay: String,
    #[serde(default = "default_wan_jitter")]
    pub wan_jitter: String,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub cloud: CloudMode,
    /// Constant per-frame size for the ledger instead of measured sizes.
    #[serde(default)]
    pub frame_bytes: Option<u64>,
    /// PMU measurement noise (off gives exact truth up to f32 encoding).
    #[serde(default = "default_true")]
    pub noise: bool,
    #[serde(default)]
    pub pseudos: PseudoMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Wall-clock pacing factor (1.0 is real time).
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    #[serde(default = "default_depth")]
    pub queue_depth: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub check: bool,
}

fn default_model() -> String {
    "ieee13-balanced".into()
}
fn default_scenario() -> String {
    "der-insertion".into()
}
fn default_wan_delay() -> String {
    "40ms".into()
}
fn default_wan_jitter() -> String {
    "5ms".into()
}
fn default_true() -> bool {
    true
}
fn default_seed() -> u64 {
    1
}
fn default_speed() -> f64 {
    1.0
}
fn default_horizon() -> f64 {
    gridmesh_dsse::alignment::DEFAULT_HORIZON_S
}
fn default_depth() -> usize {
    gridmesh_dsse::service::DEFAULT_QUEUE_DEPTH
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        toml::from_str(&format!("mode = \"{mode}\"")).expect("defaults are valid")
    }

    pub fn from_kv_str(text: &str) -> anyhow::Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_kv_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.wan_delay_ms().map_err(anyhow::Error::msg)?;
        self.wan_jitter_ms().map_err(anyhow::Error::msg)?;
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            bail!("speed must be positive");
        }
        if !(self.horizon_s > 0.0) {
            bail!("horizon_s must be positive");
        }
        if self.queue_depth == 0 {
            bail!("queue_depth must be at least 1");
        }
        if self.frame_bytes == Some(0) {
            bail!("frame_bytes must be positive");
        }
        if self.clock == ClockMode::Wall && self.cloud == CloudMode::LedgerOnly {
            bail!("ledger-only runs use the virtual clock");
        }
        Ok(())
    }

    pub fn wan_delay_ms(&self) -> Result<f64, String> {
        parse_ms(&self.wan_delay)
    }

    pub fn wan_jitter_ms(&self) -> Result<f64, String> {
        parse_ms(&self.wan_jitter)
    }

    pub fn grid_model(&self) -> anyhow::Result<GridModel> {
        if Path::new(&self.model).exists() {
            return GridModel::load(&self.model).with_context(|| format!("loading model {}", self.model));
        }
        match stem(&self.model) {
            "ieee13-balanced" => Ok(GridModel::ieee13_balanced()),
            _ => bail!("model `{}` not found", self.model),
        }
    }

    pub fn scenario_script(&self) -> anyhow::Result<ScenarioScript> {
        if let Some(secs) = self.scenario.strip_prefix("steady:") {
            let d: f64 = secs.parse().with_context(|| format!("bad steady duration `{secs}`"))?;
            let s = ScenarioScript::steady(d);
            s.validate()?;
            return Ok(s);
        }
        if Path::new(&self.scenario).exists() {
            return ScenarioScript::load(&self.scenario).with_context(|| format!("loading scenario {}", self.scenario));
        }
        match stem(&self.scenario) {
            "der-insertion" => Ok(ScenarioScript::der_insertion()),
            _ => bail!("scenario `{}` not found", self.scenario),
        }
    }
}

fn stem(p: &str) -> &str {
    Path::new(p).file_stem().and_then(|s| s.to_str()).unwrap_or(p)
}
