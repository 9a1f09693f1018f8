//! Balanced radial feeder model and its on-disk key-value document.
//!
//! A model is a tree of nodes rooted at the feeder head. The head is fed by a
//! Thevenin source (`slack` EMF behind `source` impedance); with a zero source
//! impedance the head voltage is the slack voltage itself. All electrical
//! quantities are per-unit on the model's base.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasor::Phasor;
use crate::Complex64;

pub type NodeId = u32;

pub const GRID_SCHEMA: &str = "gridmesh.grid/1";

/// Text of the bundled balanced 13-node feeder.
pub const IEEE13_BALANCED_KV: &str = include_str!("../../../data/ieee13-balanced.kv");

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("branch[{branch}] ({from} -> {to}) closes a cycle; the network must be radial")]
    NonRadial {
        branch: usize,
        from: NodeId,
        to: NodeId,
    },
    #[error("node {0} is not reachable from the root")]
    Unreachable(NodeId),
    #[error("malformed grid document: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> GridError {
    GridError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    /// Complex power demand; negative real part means net generation.
    pub load: Complex64,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub from: NodeId,
    pub to: NodeId,
    pub impedance: Complex64,
}

/// Tree structure derived from the branch list. Indices refer to positions in
/// [`GridModel::nodes`] and [`GridModel::branches`].
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    index: HashMap<NodeId, usize>,
    /// Branch feeding each node (`None` for the root).
    pub parent_branch: Vec<Option<usize>>,
    /// Node indices in breadth-first order from the root.
    pub order: Vec<usize>,
    /// Branches leaving each node.
    pub children: Vec<Vec<usize>>,
    pub branch_from: Vec<usize>,
    pub branch_to: Vec<usize>,
}

impl Topology {
    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Branches on the path from the root down to `node`, root side first.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut at = node;
        while let Some(b) = self.parent_branch[at] {
            path.push(b);
            at = self.branch_from[b];
        }
        path.reverse();
        path
    }

    /// Nodes in the subtree rooted at `node`, including itself.
    pub fn subtree(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut i = 0;
        while i < out.len() {
            let n = out[i];
            out.extend(self.children[n].iter().map(|&b| self.branch_to[b]));
            i += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    name: String,
    base_kv: f64,
    base_mva: f64,
    nodes: Vec<Node>,
    branches: Vec<Branch>,
    slack_voltage: Phasor,
    source_impedance: Complex64,
    pmu_nodes: Vec<NodeId>,
    topology: Topology,
}

impl GridModel {
    /// Validates and assembles a model. The first node is the root.
    pub fn new(
        name: impl Into<String>,
        nodes: Vec<Node>,
        branches: Vec<Branch>,
        slack_voltage: Phasor,
        source_impedance: Complex64,
    ) -> Result<Self, GridError> {
        let topology = build_topology(&nodes, &branches)?;
        for (i, b) in branches.iter().enumerate() {
            if !(b.impedance.re >= 0.0) || !b.impedance.im.is_finite() {
                return Err(invalid(
                    format!("branch[{i}].r"),
                    "resistance must be finite and non-negative",
                ));
            }
        }
        for (i, n) in nodes.iter().enumerate() {
            if !n.load.re.is_finite() || !n.load.im.is_finite() {
                return Err(invalid(format!("node[{i}].p"), "load must be finite"));
            }
        }
        if !(source_impedance.re >= 0.0) || !source_impedance.im.is_finite() {
            return Err(invalid("source.r", "resistance must be finite and non-negative"));
        }
        if !slack_voltage.is_finite() || slack_voltage.magnitude <= 0.0 {
            return Err(invalid("slack.mag", "slack voltage must be positive"));
        }
        Ok(Self {
            name: name.into(),
            base_kv: 1.0,
            base_mva: 1.0,
            nodes,
            branches,
            slack_voltage,
            source_impedance,
            pmu_nodes: Vec::new(),
            topology,
        })
    }

    pub fn with_base(mut self, base_kv: f64, base_mva: f64) -> Self {
        self.base_kv = base_kv;
        self.base_mva = base_mva;
        self
    }

    pub fn with_pmu_nodes(mut self, pmu_nodes: Vec<NodeId>) -> Result<Self, GridError> {
        for (i, id) in pmu_nodes.iter().enumerate() {
            if self.topology.index_of(*id).is_none() {
                return Err(invalid(format!("pmu_nodes[{i}]"), format!("unknown node {id}")));
            }
        }
        self.pmu_nodes = pmu_nodes;
        Ok(self)
    }

    pub fn ieee13_balanced() -> Self {
        Self::from_kv_str(IEEE13_BALANCED_KV).expect("bundled model is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn base_kv(&self) -> f64 {
        self.base_kv
    }
    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }
    pub fn slack_voltage(&self) -> Phasor {
        self.slack_voltage
    }
    pub fn source_impedance(&self) -> Complex64 {
        self.source_impedance
    }
    pub fn pmu_nodes(&self) -> &[NodeId] {
        &self.pmu_nodes
    }
    pub fn topology(&self) -> &Topology {
        &self.topology
    }
    pub fn root(&self) -> NodeId {
        self.nodes[0].id
    }
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }
    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.topology.index_of(id)
    }
    pub fn loads(&self) -> Vec<Complex64> {
        self.nodes.iter().map(|n| n.load).collect()
    }

    pub fn from_kv_str(text: &str) -> Result<Self, GridError> {
        let doc: GridDocument = toml::from_str(text).map_err(|e| GridError::Parse(e.to_string()))?;
        doc.into_model()
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(&GridDocument::from_model(self)).expect("grid document serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_kv_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let path = path.as_ref();
        fs::write(path, self.to_kv_string()).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn build_topology(nodes: &[Node], branches: &[Branch]) -> Result<Topology, GridError> {
    if nodes.is_empty() {
        return Err(invalid("node", "at least one node (the root) is required"));
    }
    let mut index = HashMap::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.id, i).is_some() {
            return Err(invalid(format!("node[{i}].id"), format!("duplicate node id {}", n.id)));
        }
    }
    let mut branch_from = Vec::with_capacity(branches.len());
    let mut branch_to = Vec::with_capacity(branches.len());
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, b) in branches.iter().enumerate() {
        let from = *index
            .get(&b.from)
            .ok_or_else(|| invalid(format!("branch[{i}].from"), format!("unknown node {}", b.from)))?;
        let to = *index
            .get(&b.to)
            .ok_or_else(|| invalid(format!("branch[{i}].to"), format!("unknown node {}", b.to)))?;
        if from == to {
            return Err(GridError::NonRadial {
                branch: i,
                from: b.from,
                to: b.to,
            });
        }
        branch_from.push(from);
        branch_to.push(to);
        adjacency[from].push(i);
        adjacency[to].push(i);
    }

    let mut parent_branch = vec![None; nodes.len()];
    let mut visited = vec![false; nodes.len()];
    let mut used = vec![false; branches.len()];
    let mut order = Vec::with_capacity(nodes.len());
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(n) = queue.pop_front() {
        order.push(n);
        for &b in &adjacency[n] {
            if used[b] {
                continue;
            }
            used[b] = true;
            let other = if branch_from[b] == n { branch_to[b] } else { branch_from[b] };
            if visited[other] {
                return Err(GridError::NonRadial {
                    branch: b,
                    from: branches[b].from,
                    to: branches[b].to,
                });
            }
            if branch_from[b] != n {
                return Err(invalid(
                    format!("branch[{b}]"),
                    format!(
                        "branch {} -> {} points toward the root; list it as {} -> {}",
                        branches[b].from, branches[b].to, branches[b].to, branches[b].from
                    ),
                ));
            }
            visited[other] = true;
            parent_branch[other] = Some(b);
            queue.push_back(other);
        }
    }
    if let Some(i) = visited.iter().position(|v| !v) {
        return Err(GridError::Unreachable(nodes[i].id));
    }
    let mut children = vec![Vec::new(); nodes.len()];
    for (b, &from) in branch_from.iter().enumerate() {
        children[from].push(b);
    }
    Ok(Topology {
        index,
        parent_branch,
        order,
        children,
        branch_from,
        branch_to,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDocument {
    schema: String,
    name: String,
    base_kv: f64,
    base_mva: f64,
    #[serde(default)]
    pmu_nodes: Vec<NodeId>,
    slack: PolarDoc,
    #[serde(default)]
    source: ImpedanceDoc,
    #[serde(rename = "node")]
    nodes: Vec<NodeDoc>,
    #[serde(rename = "branch", default)]
    branches: Vec<BranchDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolarDoc {
    mag: f64,
    #[serde(default)]
    ang: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImpedanceDoc {
    r: f64,
    x: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default)]
    p: f64,
    #[serde(default)]
    q: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDoc {
    from: NodeId,
    to: NodeId,
    r: f64,
    x: f64,
}

impl GridDocument {
    fn into_model(self) -> Result<GridModel, GridError> {
        if self.schema != GRID_SCHEMA {
            return Err(invalid(
                "schema",
                format!("expected `{GRID_SCHEMA}`, found `{}`", self.schema),
            ));
        }
        if !(self.base_kv > 0.0) {
            return Err(invalid("base_kv", "must be positive"));
        }
        if !(self.base_mva > 0.0) {
            return Err(invalid("base_mva", "must be positive"));
        }
        let nodes = self
            .nodes
            .into_iter()
            .map(|n| Node {
                id: n.id,
                load: Complex64::new(n.p, n.q),
                label: n.label,
            })
            .collect();
        let branches = self
            .branches
            .into_iter()
            .map(|b| Branch {
                from: b.from,
                to: b.to,
                impedance: Complex64::new(b.r, b.x),
            })
            .collect();
        let model = GridModel::new(
            self.name,
            nodes,
            branches,
            Phasor::new(self.slack.mag, self.slack.ang),
            Complex64::new(self.source.r, self.source.x),
        )?
        .with_base(self.base_kv, self.base_mva)
        .with_pmu_nodes(self.pmu_nodes)?;
        Ok(model)
    }

    fn from_model(model: &GridModel) -> Self {
        Self {
            schema: GRID_SCHEMA.to_string(),
            name: model.name.clone(),
            base_kv: model.base_kv,
            base_mva: model.base_mva,
            pmu_nodes: model.pmu_nodes.clone(),
            slack: PolarDoc {
                mag: model.slack_voltage.magnitude,
                ang: model.slack_voltage.angle,
            },
            source: ImpedanceDoc {
                r: model.source_impedance.re,
                x: model.source_impedance.im,
            },
            nodes: model
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.id,
                    label: n.label.clone(),
                    p: n.load.re,
                    q: n.load.im,
                })
                .collect(),
            branches: model
                .branches
                .iter()
                .map(|b| BranchDoc {
                    from: b.from,
                    to: b.to,
                    r: b.impedance.re,
                    x: b.impedance.im,
                })
                .collect(),
        }
    }
}

/// Per-node loads keyed by node id, handy for building load vectors.
pub fn loads_by_id(model: &GridModel, loads: &[Complex64]) -> BTreeMap<NodeId, Complex64> {
    model.nodes.iter().map(|n| n.id).zip(loads.iter().copied()).collect()
}
