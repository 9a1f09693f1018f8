//! Per-trigger estimation: alignment, measurement assembly, WLS with cached
//! gains, persistence and the command decision rules.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use gridmesh_core::clock::Clock;
use gridmesh_core::grid::{loads_by_id, GridModel, NodeId};
use gridmesh_core::report::{Command, ReportError, VoReport};
use gridmesh_core::scenario::ScenarioScript;
use gridmesh_core::time::GpsTimestamp;
use gridmesh_core::wls::{
    build_gain, linearize_pseudomeasurements, standard_configuration, EstimationResult, GainCache, Measurement,
    MeasurementSet, PseudoSigma, RelinearizeOptions, WlsError, PMU_SIGMA,
};
use gridmesh_core::{Complex64, Phasor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignedSource, AlignmentBuffer};
use crate::broker::Broker;
use crate::registry::{Registry, VoRegistration};
use crate::store::{EstimatedState, EstimationRecord, RecordStore, SourceUse, StoreError, Trigger};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed report: {0}")]
    Malformed(#[from] ReportError),
    #[error("unknown vo_id `{0}`; VOs must be registered")]
    UnknownVo(String),
    #[error("report from `{vo}` lacks channel `{channel}`")]
    MissingChannel { vo: String, channel: String },
    #[error("persisting record failed: {0}")]
    Store(#[from] StoreError),
}

/// Where load pseudomeasurements come from.
#[derive(Debug, Clone)]
pub enum PseudoSource {
    /// Fixed per-node demands (model node order), e.g. the model's base loads.
    Forecast(Vec<Complex64>),
    /// The scenario's own event-adjusted demands at the trigger time.
    Scenario(ScenarioScript),
}

impl PseudoSource {
    pub fn loads_at(&self, model: &GridModel, ts: GpsTimestamp) -> Vec<Complex64> {
        match self {
            PseudoSource::Forecast(l) => l.clone(),
            PseudoSource::Scenario(s) => s.loads_at(model, ts.as_micros()).unwrap_or_else(|_| model.loads()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Variance per rectangular component of a PMU voltage.
    pub voltage_variance: f64,
    pub pseudo_sigma: PseudoSigma,
    pub relinearize: RelinearizeOptions,
    pub horizon_s: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            voltage_variance: PMU_SIGMA * PMU_SIGMA,
            pseudo_sigma: PseudoSigma::default(),
            relinearize: RelinearizeOptions::default(),
            horizon_s: crate::alignment::DEFAULT_HORIZON_S,
        }
    }
}

/// WLS over whatever VO measurements are aligned at a trigger. One gain is
/// built per distinct set of contributing VOs and reused afterwards.
pub struct Estimator {
    model: GridModel,
    pseudo: PseudoSource,
    config: EngineConfig,
    caches: HashMap<Vec<NodeId>, Result<GainCache, WlsError>>,
    guess: Vec<Complex64>,
}

impl Estimator {
    pub fn new(model: GridModel, pseudo: PseudoSource, config: EngineConfig) -> Self {
        let guess = vec![Complex64::new(1.0, 0.0); model.nodes().len()];
        Self {
            model,
            pseudo,
            config,
            caches: HashMap::new(),
            guess,
        }
    }

    pub fn model(&self) -> &GridModel {
        &self.model
    }

    /// Number of gains built so far.
    pub fn gains_built(&self) -> usize {
        self.caches.values().filter(|c| c.is_ok()).count()
    }

    fn cache_for(&mut self, nodes: &[NodeId]) -> Result<&GainCache, WlsError> {
        let (model, config) = (&self.model, self.config);
        self.caches
            .entry(nodes.to_vec())
            .or_insert_with(|| {
                let slots = standard_configuration(model, nodes, config.voltage_variance, &model.loads(), config.pseudo_sigma)?;
                build_gain(model, &slots)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Estimates the network state from aligned sources at `trigger`.
    pub fn estimate(&mut self, sources: &[AlignedSource], trigger: GpsTimestamp) -> Result<EstimationResult, WlsError> {
        let nodes: Vec<NodeId> = sources.iter().map(|s| s.node).collect();
        let loads = self.pseudo.loads_at(&self.model, trigger);
        let demands: Vec<(NodeId, Complex64)> =
            self.model.nodes().iter().zip(&loads).skip(1).map(|(n, &s)| (n.id, s)).collect();
        let guess: Vec<Complex64> = self.guess[1..].to_vec();
        let sigma = self.config.pseudo_sigma;
        let relinearize = self.config.relinearize;
        let mut entries: Vec<Measurement> = sources
            .iter()
            .map(|s| Measurement::voltage(s.node, s.phasor.to_rect(), self.config.voltage_variance).at(s.ts))
            .collect();
        entries.extend(linearize_pseudomeasurements(&demands, &guess, sigma)?);
        let by_id: BTreeMap<NodeId, Complex64> = loads_by_id(&self.model, &loads);
        let cache = self.cache_for(&nodes)?;
        let result = cache.estimate_relinearized(&MeasurementSet::new(entries), &by_id, relinearize)?;
        self.guess.clone_from(&result.node_voltages);
        Ok(result)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleAction {
    /// Return the command to the VO whose report triggered the estimation.
    Reply,
    /// Publish the command on the bus.
    Publish,
}

/// Fires when a node's estimated voltage magnitude crosses into the
/// configured band's outside (above `above` or below `below`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub node: NodeId,
    #[serde(default)]
    pub above: Option<f64>,
    #[serde(default)]
    pub below: Option<f64>,
    pub action: RuleAction,
    pub command: Command,
}

impl Rule {
    fn violated(&self, v: f64) -> bool {
        self.above.is_some_and(|a| v > a) || self.below.is_some_and(|b| v < b)
    }
}

/// Acknowledgement of one ingested report.
#[derive(Debug, Clone, PartialEq)]
pub struct Ack {
    pub seq: u64,
    pub command: Option<Command>,
    pub queue_ms: f64,
    pub solve_ms: f64,
    pub persist_ms: f64,
}

/// The single-consumer estimation pipeline behind the service endpoints.
pub struct DsseCore {
    registry: Registry,
    estimator: Estimator,
    buffer: AlignmentBuffer,
    store: RecordStore,
    rules: Vec<Rule>,
    rule_active: Vec<bool>,
    broker: Option<Broker>,
    clock: Arc<dyn Clock>,
    next_seq: u64,
}

impl DsseCore {
    pub fn new(registry: Registry, estimator: Estimator, store: RecordStore, clock: Arc<dyn Clock>) -> Self {
        let next_seq = store.last_seq().map_or(1, |s| s + 1);
        let horizon = estimator.config.horizon_s;
        Self {
            registry,
            estimator,
            buffer: AlignmentBuffer::new(horizon),
            store,
            rules: Vec::new(),
            rule_active: Vec::new(),
            broker: None,
            clock,
            next_seq,
        }
    }

    pub fn with_rules(mut self, rules: Vec<Rule>) -> Self {
        self.rule_active = vec![false; rules.len()];
        self.rules = rules;
        self
    }

    pub fn with_broker(mut self, broker: Broker) -> Self {
        self.broker = Some(broker);
        self
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut RecordStore {
        &mut self.store
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Checks a report against the registry and extracts its voltage.
    pub fn admit<'a>(&'a self, report: &VoReport) -> Result<(&'a VoRegistration, Phasor), IngestError> {
        report.validate()?;
        let reg = self.registry.get(&report.vo_id).ok_or_else(|| IngestError::UnknownVo(report.vo_id.clone()))?;
        let channel = reg.channel();
        let phasor = *report.phasors.get(&channel).ok_or_else(|| IngestError::MissingChannel {
            vo: report.vo_id.clone(),
            channel,
        })?;
        Ok((reg, phasor))
    }

    /// Buffers a report without estimating (used for coalesced triggers).
    pub fn buffer_only(&mut self, report: &VoReport) -> Result<(), IngestError> {
        let (reg, phasor) = self.admit(report)?;
        let node = reg.node;
        self.buffer.insert(&report.vo_id, node, report.ts, phasor);
        Ok(())
    }

    /// Buffers a report and runs the estimation it triggers. `received_us`
    /// is the clock reading when the report arrived.
    pub fn process(&mut self, report: &VoReport, received_us: u64) -> Result<Ack, IngestError> {
        let (reg, phasor) = self.admit(report)?;
        let node = reg.node;
        let start = self.clock.now_micros();
        let queue_ms = start.saturating_sub(received_us) as f64 / 1000.0;
        self.buffer.insert(&report.vo_id, node, report.ts, phasor);
        let aligned = self.buffer.aligned(report.ts);
        let outcome = self.estimator.estimate(&aligned, report.ts);
        let solve_ms = self.clock.elapsed_ms_since(start);

        let seq = self.next_seq;
        let sources = aligned
            .iter()
            .map(|s| SourceUse {
                vo_id: s.vo_id.clone(),
                node: s.node,
                ts: s.ts,
                staleness_s: s.staleness_s,
                stale: s.stale,
            })
            .collect();
        let mut record = EstimationRecord {
            seq,
            trigger: Trigger {
                vo_id: report.vo_id.clone(),
                ts: report.ts,
            },
            sources,
            state: None,
            voltages: BTreeMap::new(),
            residual: 0.0,
            passes: 0,
            queue_ms,
            solve_ms,
            error: None,
        };
        match &outcome {
            Ok(r) => {
                record.state = Some(EstimatedState::from_complex(r.state.root_voltage, &r.state.branch_currents));
                record.voltages = self
                    .estimator
                    .model
                    .nodes()
                    .iter()
                    .zip(&r.node_voltages)
                    .map(|(n, &v)| (n.id, Phasor::from_rect(v)))
                    .collect();
                record.residual = r.residual_norm;
                record.passes = r.solves;
            }
            Err(e) => {
                let deferred = matches!(e, WlsError::Unobservable { .. });
                record.error = Some(if deferred { format!("deferred: {e}") } else { e.to_string() });
                log::warn!("estimation for {} at {} failed: {e}", report.vo_id, report.ts);
            }
        }

        let persist_start = self.clock.now_micros();
        let command = self.apply_rules(&record);
        self.store.append(record)?;
        let persist_ms = self.clock.elapsed_ms_since(persist_start);
        self.next_seq += 1;
        Ok(Ack {
            seq,
            command,
            queue_ms,
            solve_ms,
            persist_ms,
        })
    }

    fn apply_rules(&mut self, record: &EstimationRecord) -> Option<Command> {
        let mut reply = None;
        for (rule, active) in self.rules.iter().zip(self.rule_active.iter_mut()) {
            let Some(v) = record.voltages.get(&rule.node) else { continue };
            let violated = rule.violated(v.magnitude);
            let rising = violated && !*active;
            *active = violated;
            if !rising {
                continue;
            }
            let cmd = rule.command.clone().with("node", rule.node).with("vmag_pu", v.magnitude);
            match rule.action {
                RuleAction::Reply => reply = reply.or(Some(cmd)),
                RuleAction::Publish => {
                    if let Some(b) = &self.broker {
                        if let Err(e) = b.publish(&cmd) {
                            log::warn!("publishing {}: {e}", cmd.topic);
                        }
                    }
                }
            }
        }
        reply
    }
}
