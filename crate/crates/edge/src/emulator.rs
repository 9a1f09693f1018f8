//! PMU emulator: replays one node of a truth series as a 50 fps stream of
//! three-phase synchrophasor frames.
//!
//! The feeder is balanced, so phases B and C are phase A rotated by -120 and
//! +120 degrees. Noise is drawn independently per channel.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use gridmesh_core::grid::NodeId;
use gridmesh_core::scenario::TruthSeries;
use gridmesh_core::wire::{encode_frame, PmuDataFrame, Status};
use gridmesh_core::Phasor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;
use tokio::time::Instant;

/// The only stream period a PMU supports (50 frames/s).
pub const SAMPLE_PERIOD_S: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EmulatorError {
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("node {0} is not in the truth series")]
    MissingNode(NodeId),
    #[error("truth series period is {0} us, the PMU streams every 20000 us")]
    PeriodMismatch(u64),
    #[error("malformed PMU config: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Relative standard deviation of the magnitude.
    pub sigma_mag: f64,
    /// Standard deviation of the angle (rad).
    pub sigma_ang: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        sigma_mag: 0.0,
        sigma_ang: 0.0,
    };
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_mag: 2e-4,
            sigma_ang: 1e-4,
        }
    }
}

/// Multiplies the magnitude by `1 + N(0, sigma_mag)` and shifts the angle by
/// `N(0, sigma_ang)`. A zero sigma leaves that component untouched and draws
/// nothing from `rng`.
pub fn apply_noise(sample: Phasor, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> Phasor {
    let mut mag = sample.magnitude;
    let mut ang = sample.angle;
    if noise.sigma_mag > 0.0 {
        let n = Normal::new(0.0, noise.sigma_mag).expect("sigma is finite");
        mag *= 1.0 + n.sample(rng);
    }
    if noise.sigma_ang > 0.0 {
        let n = Normal::new(0.0, noise.sigma_ang).expect("sigma is finite");
        ang += n.sample(rng);
    }
    if mag == sample.magnitude && ang == sample.angle {
        return sample;
    }
    Phasor::new(mag, ang)
}

fn default_period() -> f64 {
    SAMPLE_PERIOD_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmuConfig {
    pub idcode: u16,
    pub node: NodeId,
    #[serde(default = "default_period")]
    pub sample_period_s: f64,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Address of the paired VO's ingest socket.
    pub endpoint: String,
    #[serde(default)]
    pub seed: u64,
}

impl PmuConfig {
    pub fn new(node: NodeId, endpoint: impl Into<String>) -> Self {
        Self {
            idcode: node as u16,
            node,
            sample_period_s: SAMPLE_PERIOD_S,
            noise: NoiseModel::default(),
            endpoint: endpoint.into(),
            seed: node as u64,
        }
    }

    pub fn validate(&self) -> Result<(), EmulatorError> {
        if self.sample_period_s != SAMPLE_PERIOD_S {
            return Err(EmulatorError::Invalid {
                field: "sample_period_s",
                message: format!("the PMU rate is fixed at {SAMPLE_PERIOD_S} s"),
            });
        }
        for (field, v) in [("noise.sigma_mag", self.noise.sigma_mag), ("noise.sigma_ang", self.noise.sigma_ang)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EmulatorError::Invalid {
                    field,
                    message: "must be finite and non-negative".into(),
                });
            }
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self, EmulatorError> {
        let c: PmuConfig = toml::from_str(text).map_err(|e| EmulatorError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmulatorError> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

/// Iterator over the frames one PMU emits for a truth series.
pub struct FrameSource {
    config: PmuConfig,
    truth: Arc<TruthSeries>,
    tick: u64,
    rng: ChaCha8Rng,
}

impl FrameSource {
    pub fn new(config: PmuConfig, truth: Arc<TruthSeries>) -> Result<Self, EmulatorError> {
        config.validate()?;
        if !truth.nodes().contains(&config.node) {
            return Err(EmulatorError::MissingNode(config.node));
        }
        if truth.period_us() != 20_000 {
            return Err(EmulatorError::PeriodMismatch(truth.period_us()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            truth,
            tick: 0,
            rng,
        })
    }

    pub fn total_frames(&self) -> u64 {
        self.truth.tick_count()
    }

    fn frame_at(&mut self, tick: u64) -> PmuDataFrame {
        let s = self.truth.sample(tick, self.config.node).expect("checked at construction");
        let v = s.voltage;
        let phases = [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0];
        let phasors = phases
            .iter()
            .map(|shift| {
                let p = if *shift == 0.0 { v } else { Phasor::new(v.magnitude, v.angle + shift) };
                apply_noise(p, &self.config.noise, &mut self.rng)
            })
            .collect();
        PmuDataFrame {
            idcode: self.config.idcode,
            timestamp: s.timestamp,
            status: Status::OK,
            phasors,
            freq: s.freq,
            rocof: s.rocof,
        }
    }
}

impl Iterator for FrameSource {
    type Item = PmuDataFrame;

    fn next(&mut self) -> Option<PmuDataFrame> {
        if self.tick >= self.truth.tick_count() {
            return None;
        }
        let f = self.frame_at(self.tick);
        self.tick += 1;
        Some(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// Scaled real time: 1.0 is one frame per 20 ms.
    RealTime { speed: f64 },
    /// No pacing.
    Max,
}

impl std::str::FromStr for Pacing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "max" {
            return Ok(Pacing::Max);
        }
        let speed: f64 = s.parse().map_err(|_| format!("`{s}` is neither a number nor `max`"))?;
        if !(speed > 0.0 && speed.is_finite()) {
            return Err("speed must be positive".into());
        }
        Ok(Pacing::RealTime { speed })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    pub sent: u64,
    pub dropped: u64,
    pub connects: u64,
}

const BACKOFF_START: Duration = Duration::from_millis(20);
const BACKOFF_MAX: Duration = Duration::from_secs(1);

/// Streams every frame to the VO, one frame per write. Frames that cannot be
/// written because the connection is down are dropped and counted; the
/// emulator reconnects with exponential backoff capped at one second.
pub async fn stream(config: PmuConfig, truth: Arc<TruthSeries>, pacing: Pacing) -> Result<StreamStats, EmulatorError> {
    let endpoint = config.endpoint.clone();
    let source = FrameSource::new(config, truth)?;
    let mut stats = StreamStats::default();
    let mut conn: Option<TcpStream> = None;
    let mut backoff = BACKOFF_START;
    let mut next_attempt = Instant::now();
    let start = Instant::now();
    for (k, frame) in source.enumerate() {
        if let Pacing::RealTime { speed } = pacing {
            let due = start + Duration::from_secs_f64(k as f64 * SAMPLE_PERIOD_S / speed);
            tokio::time::sleep_until(due).await;
        }
        let bytes = encode_frame(&frame).expect("emulated frames are finite");
        if conn.is_none() && Instant::now() >= next_attempt {
            match TcpStream::connect(&endpoint).await {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    conn = Some(s);
                    stats.connects += 1;
                    backoff = BACKOFF_START;
                }
                Err(e) => {
                    log::warn!("pmu {}: connect to {endpoint} failed: {e}", frame.idcode);
                    next_attempt = Instant::now() + backoff;
                    backoff = (backoff * 2).min(BACKOFF_MAX);
                }
            }
        }
        let Some(s) = conn.as_mut() else {
            stats.dropped += 1;
            continue;
        };
        match s.write_all(&bytes).await {
            Ok(()) => stats.sent += 1,
            Err(e) => {
                log::warn!("pmu {}: write failed: {e}", frame.idcode);
                conn = None;
                stats.dropped += 1;
                next_attempt = Instant::now();
            }
        }
    }
    if let Some(mut s) = conn {
        s.shutdown().await.ok();
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridmesh_core::grid::GridModel;
    use gridmesh_core::phasor::positive_sequence;
    use gridmesh_core::scenario::{run_scenario, ScenarioScript};
    use gridmesh_core::time::GpsTimestamp;

    fn truth() -> Arc<TruthSeries> {
        let model = GridModel::ieee13_balanced();
        Arc::new(run_scenario(&model, &ScenarioScript::der_insertion()).unwrap())
    }

    #[test]
    fn one_frame_per_tick_on_the_20ms_grid() {
        let frames: Vec<_> = FrameSource::new(PmuConfig::new(31, "x"), truth()).unwrap().collect();
        assert_eq!(frames.len(), 1500);
        for (k, f) in frames.iter().enumerate() {
            let us = k as u64 * 20_000;
            assert_eq!(f.timestamp, GpsTimestamp::from_micros(us));
            assert_eq!(f.timestamp.frac % 20_000, 0);
            assert_eq!(f.phasors.len(), 3);
        }
    }

    #[test]
    fn zero_noise_reproduces_truth() {
        let t = truth();
        let mut cfg = PmuConfig::new(71, "x");
        cfg.noise = NoiseModel::NONE;
        for (k, f) in FrameSource::new(cfg, t.clone()).unwrap().enumerate().step_by(97) {
            let v = t.sample(k as u64, 71).unwrap().voltage;
            assert_eq!(f.phasors[0], v);
            let seq = positive_sequence(f.phasors[0].to_rect(), f.phasors[1].to_rect(), f.phasors[2].to_rect());
            assert!((seq - v.to_rect()).norm() < 1e-14);
        }
    }

    #[test]
    fn two_pmus_share_timestamps() {
        let t = truth();
        let a: Vec<_> = FrameSource::new(PmuConfig::new(31, "x"), t.clone()).unwrap().map(|f| f.timestamp).collect();
        let b: Vec<_> = FrameSource::new(PmuConfig::new(71, "x"), t).unwrap().map(|f| f.timestamp).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_is_seeded() {
        let noise = NoiseModel { sigma_mag: 1e-3, sigma_ang: 1e-3 };
        let p = Phasor::new(1.0, 0.3);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| apply_noise(p, &noise, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_noise(p, &NoiseModel::NONE, &mut rng), p);
    }

    #[test]
    fn noise_magnitude_statistics() {
        let noise = NoiseModel { sigma_mag: 1e-3, sigma_ang: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let rel: Vec<f64> = (0..n).map(|_| apply_noise(Phasor::new(2.0, 0.0), &noise, &mut rng).magnitude / 2.0 - 1.0).collect();
        let mean = rel.iter().sum::<f64>() / n as f64;
        let sd = (rel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd / 1e-3 - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn config_validation() {
        let text = "idcode = 31\nnode = 31\nendpoint = \"127.0.0.1:4712\"\n";
        let c = PmuConfig::from_kv_str(text).unwrap();
        assert_eq!(c.noise, NoiseModel::default());
        let bad = format!("{text}sample_period_s = 0.01\n");
        assert!(PmuConfig::from_kv_str(&bad).unwrap_err().to_string().starts_with("sample_period_s"));
        let bad = format!("{text}[noise]\nsigma_mag = -1.0\nsigma_ang = 0.0\n");
        assert!(PmuConfig::from_kv_str(&bad).unwrap_err().to_string().starts_with("noise.sigma_mag"));
        assert!(matches!(FrameSource::new(PmuConfig::new(999, "x"), truth()), Err(EmulatorError::MissingNode(999))));
    }

    #[test]
    fn pacing_parses() {
        assert_eq!("max".parse::<Pacing>().unwrap(), Pacing::Max);
        assert_eq!("2.5".parse::<Pacing>().unwrap(), Pacing::RealTime { speed: 2.5 });
        assert!("0".parse::<Pacing>().is_err());
    }
}
