//! Service configuration document.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use gridmesh_core::clock::Clock;
use gridmesh_core::grid::GridModel;
use gridmesh_core::scenario::ScenarioScript;
use serde::{Deserialize, Serialize};

use crate::engine::{DsseCore, EngineConfig, Estimator, PseudoSource, Rule};
use crate::registry::Registry;
use crate::service::DEFAULT_QUEUE_DEPTH;
use crate::store::RecordStore;

/// ```toml
/// listen = "127.0.0.1:8080"
/// broker = "127.0.0.1:1883"     # optional line-protocol listener
/// model = "data/ieee13-balanced.kv"
/// registry = "vos.kv"          # optional; defaults to the model's PMU nodes
/// records = "records.log"      # optional; in-memory when absent
/// pseudos = "forecast"         # or a scenario file path
/// horizon_s = 2.0
/// queue_depth = 64
///
/// [[rule]]
/// node = 75
/// above = 1.05
/// action = "publish"
/// command = { topic = "grid/der/75/curtail", qos = "at-least-once" }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsseConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default)]
    pub broker: Option<SocketAddr>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub records: Option<PathBuf>,
    #[serde(default = "default_pseudos")]
    pub pseudos: String,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    #[serde(default = "default_depth")]
    pub queue_depth: usize,
    #[serde(default, rename = "rule")]
    pub rules: Vec<Rule>,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:8080".parse().expect("literal address")
}

fn default_pseudos() -> String {
    "forecast".into()
}

fn default_horizon() -> f64 {
    crate::alignment::DEFAULT_HORIZON_S
}

fn default_depth() -> usize {
    DEFAULT_QUEUE_DEPTH
}

impl Default for DsseConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

impl DsseConfig {
    pub fn from_kv_str(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_kv_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            bail!("horizon_s must be positive, got {}", self.horizon_s);
        }
        if self.queue_depth == 0 {
            bail!("queue_depth must be at least 1");
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.above.is_none() && r.below.is_none() {
                bail!("rule[{i}] needs `above` or `below`");
            }
        }
        Ok(())
    }

    pub fn grid_model(&self) -> anyhow::Result<GridModel> {
        match &self.model {
            Some(p) => GridModel::load(p).with_context(|| format!("loading model {}", p.display())),
            None => Ok(GridModel::ieee13_balanced()),
        }
    }

    /// Assembles the estimation core described by this document.
    pub fn build_core(&self, clock: Arc<dyn Clock>) -> anyhow::Result<DsseCore> {
        let model = self.grid_model()?;
        for r in &self.rules {
            if model.index_of(r.node).is_none() {
                bail!("rule references node {} which is not in the model", r.node);
            }
        }
        let registry = match &self.registry {
            Some(p) => Registry::load(p, &model)?,
            None => Registry::from_model(&model),
        };
        let pseudo = if self.pseudos == "forecast" {
            PseudoSource::Forecast(model.loads())
        } else {
            PseudoSource::Scenario(ScenarioScript::load(&self.pseudos)?)
        };
        let store = match &self.records {
            Some(p) => RecordStore::open(p)?,
            None => RecordStore::in_memory(),
        };
        let config = EngineConfig {
            horizon_s: self.horizon_s,
            ..EngineConfig::default()
        };
        let estimator = Estimator::new(model, pseudo, config);
        Ok(DsseCore::new(registry, estimator, store, clock).with_rules(self.rules.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RuleAction;

    #[test]
    fn documented_example_parses() {
        let text = r#"
listen = "127.0.0.1:0"
pseudos = "forecast"
[[rule]]
node = 75
above = 1.05
action = "publish"
command = { topic = "grid/der/75/curtail", qos = "at-least-once" }
"#;
        let cfg = DsseConfig::from_kv_str(text).unwrap();
        assert_eq!(cfg.rules[0].action, RuleAction::Publish);
        assert_eq!(cfg.queue_depth, DEFAULT_QUEUE_DEPTH);
        let core = cfg.build_core(Arc::new(gridmesh_core::clock::VirtualClock::new())).unwrap();
        assert_eq!(core.registry().len(), 2);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(DsseConfig::from_kv_str("horizon_s = 0.0").is_err());
        assert!(DsseConfig::from_kv_str("colour = 1").is_err());
        let rule = "[[rule]]\nnode = 75\naction = \"reply\"\ncommand = { topic = \"a\" }\n";
        assert!(DsseConfig::from_kv_str(rule).is_err());
    }
}
