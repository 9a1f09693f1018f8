//! Static VO registration: which VO measures which node through which
//! report channel.

use std::collections::BTreeMap;
use std::path::Path;

use gridmesh_core::grid::{GridModel, NodeId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("vo[{index}]: {message}")]
    Invalid { index: usize, message: String },
    #[error("malformed registry: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoRegistration {
    pub id: String,
    pub node: NodeId,
    /// Report channel carrying the node's positive-sequence voltage;
    /// defaults to `V{node}`.
    #[serde(default)]
    pub channel: Option<String>,
}

impl VoRegistration {
    pub fn channel(&self) -> String {
        self.channel.clone().unwrap_or_else(|| format!("V{}", self.node))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryDocument {
    #[serde(rename = "vo")]
    vos: Vec<VoRegistration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Registry {
    vos: BTreeMap<String, VoRegistration>,
}

/// Conventional VO id for the PMU at a node.
pub fn vo_id_for(node: NodeId) -> String {
    format!("vo{node}")
}

impl Registry {
    pub fn new(vos: impl IntoIterator<Item = VoRegistration>, model: &GridModel) -> Result<Self, RegistryError> {
        let mut out = BTreeMap::new();
        for (index, v) in vos.into_iter().enumerate() {
            if v.id.is_empty() {
                return Err(RegistryError::Invalid { index, message: "id is empty".into() });
            }
            if model.index_of(v.node).is_none() {
                return Err(RegistryError::Invalid {
                    index,
                    message: format!("node {} is not in model `{}`", v.node, model.name()),
                });
            }
            if out.contains_key(&v.id) {
                return Err(RegistryError::Invalid { index, message: format!("duplicate id `{}`", v.id) });
            }
            out.insert(v.id.clone(), v);
        }
        Ok(Self { vos: out })
    }

    /// One VO per PMU node annotated in the model.
    pub fn from_model(model: &GridModel) -> Self {
        let vos = model.pmu_nodes().iter().map(|&n| VoRegistration {
            id: vo_id_for(n),
            node: n,
            channel: None,
        });
        Self::new(vos, model).expect("model PMU nodes are valid")
    }

    pub fn from_kv_str(text: &str, model: &GridModel) -> Result<Self, RegistryError> {
        let doc: RegistryDocument = toml::from_str(text).map_err(|e| RegistryError::Parse(e.to_string()))?;
        Self::new(doc.vos, model)
    }

    pub fn load(path: impl AsRef<Path>, model: &GridModel) -> Result<Self, RegistryError> {
        Self::from_kv_str(&std::fs::read_to_string(path)?, model)
    }

    pub fn get(&self, id: &str) -> Option<&VoRegistration> {
        self.vos.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &VoRegistration> {
        self.vos.values()
    }

    pub fn len(&self) -> usize {
        self.vos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vos.is_empty()
    }
}
