//! Branch-current weighted-least-squares state estimation.
//!
//! The state holds the root voltage followed by every branch current, in
//! rectangular coordinates:
//!
//! ```text
//! x = [Re V_root, Im V_root, Re I_0, Im I_0, Re I_1, Im I_1, ...]
//! ```
//!
//! Every measurement is linear in `x`:
//!
//! - a voltage phasor at node k: `V_k = V_root - sum over the root-to-k path of Z_b I_b`;
//! - a load current at non-root node k: `I_parent(k) - sum of I_children(k)`.
//!
//! Load power pseudomeasurements are turned into load currents around a
//! voltage guess (`I = conj(S / V)`), so the whole problem is one linear
//! solve against a gain matrix that is factorized once per measurement
//! configuration and reused for every estimate.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::grid::{GridModel, NodeId};
use crate::time::GpsTimestamp;
use crate::Complex64;

/// Default PMU standard deviation per rectangular component (pu).
pub const PMU_SIGMA: f64 = 1e-3;

/// Relative singular-value cutoff for the observability check.
const RANK_TOLERANCE: f64 = 1e-10;

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of gain factorizations performed on the calling thread.
pub fn factorization_count() -> u64 {
    FACTORIZATIONS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WlsError {
    #[error("network is unobservable: {deficiency} of {states} state directions are undetermined")]
    Unobservable { deficiency: usize, states: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("load-current measurement at the root node {0} is not expressible in branch currents")]
    RootInjection(NodeId),
    #[error("variance of measurement {index} must be positive and finite")]
    BadVariance { index: usize },
    #[error("voltage guess at node {0} is too close to zero to linearize around")]
    ZeroVoltage(NodeId),
    #[error("measurement set does not match the gain configuration: {0}")]
    ConfigMismatch(String),
    #[error("non-finite value in measurement {index}")]
    NonFinite { index: usize },
    #[error("no measurements")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeasurementKind {
    /// Node voltage phasor from a PMU.
    VoltagePhasor,
    /// Load current at a node, usually a linearized power pseudomeasurement.
    LoadCurrent,
}

/// One slot of the measurement configuration: what is measured where, and
/// with which variance per rectangular component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSlot {
    pub kind: MeasurementKind,
    pub node: NodeId,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub node: NodeId,
    /// Voltage (pu) or load current (pu) in rectangular form.
    pub value: Complex64,
    pub variance: f64,
    pub timestamp: Option<GpsTimestamp>,
}

impl Measurement {
    pub fn voltage(node: NodeId, value: Complex64, variance: f64) -> Self {
        Self {
            kind: MeasurementKind::VoltagePhasor,
            node,
            value,
            variance,
            timestamp: None,
        }
    }

    pub fn load_current(node: NodeId, value: Complex64, variance: f64) -> Self {
        Self {
            kind: MeasurementKind::LoadCurrent,
            node,
            value,
            variance,
            timestamp: None,
        }
    }

    pub fn at(mut self, ts: GpsTimestamp) -> Self {
        self.timestamp = Some(ts);
        self
    }

    pub fn slot(&self) -> MeasurementSlot {
        MeasurementSlot {
            kind: self.kind,
            node: self.node,
            variance: self.variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet {
    pub entries: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(entries: Vec<Measurement>) -> Self {
        Self { entries }
    }

    pub fn slots(&self) -> Vec<MeasurementSlot> {
        self.entries.iter().map(Measurement::slot).collect()
    }
}

/// Standard deviation of a power pseudomeasurement per rectangular
/// component: `max(relative * |S|, floor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoSigma {
    pub relative: f64,
    pub floor: f64,
}

impl Default for PseudoSigma {
    fn default() -> Self {
        Self {
            relative: 0.3,
            floor: 1e-4,
        }
    }
}

impl PseudoSigma {
    pub fn sigma(&self, s: Complex64) -> f64 {
        (self.relative * s.norm()).max(self.floor)
    }
}

const MIN_GUESS_MAGNITUDE: f64 = 1e-6;

/// Turns complex power demands into load-current measurements around a
/// voltage guess. The power variance `sigma^2` per component maps to
/// `sigma^2 / |V|^2` per current component.
pub fn linearize_pseudomeasurements(
    loads: &[(NodeId, Complex64)],
    guess: &[Complex64],
    sigma: PseudoSigma,
) -> Result<Vec<Measurement>, WlsError> {
    if loads.len() != guess.len() {
        return Err(WlsError::ConfigMismatch(format!(
            "{} loads but {} guess voltages",
            loads.len(),
            guess.len()
        )));
    }
    loads
        .iter()
        .zip(guess)
        .map(|(&(node, s), &v)| {
            let (current, variance) = linearize_one(s, v, sigma).ok_or(WlsError::ZeroVoltage(node))?;
            Ok(Measurement::load_current(node, current, variance))
        })
        .collect()
}

fn linearize_one(s: Complex64, v: Complex64, sigma: PseudoSigma) -> Option<(Complex64, f64)> {
    let mag = v.norm();
    if !(mag >= MIN_GUESS_MAGNITUDE) {
        return None;
    }
    let sd = sigma.sigma(s);
    Some(((s / v).conj(), sd * sd / (mag * mag)))
}

/// Voltage rows for each `voltage_nodes` entry followed by one linearized
/// pseudo row per non-root node, variances taken at the flat profile.
pub fn standard_configuration(
    model: &GridModel,
    voltage_nodes: &[NodeId],
    voltage_variance: f64,
    loads: &[Complex64],
    sigma: PseudoSigma,
) -> Result<Vec<MeasurementSlot>, WlsError> {
    let mut slots = Vec::new();
    for &node in voltage_nodes {
        model.index_of(node).ok_or(WlsError::UnknownNode(node))?;
        slots.push(MeasurementSlot {
            kind: MeasurementKind::VoltagePhasor,
            node,
            variance: voltage_variance,
        });
    }
    let flat = Complex64::new(1.0, 0.0);
    for (node, &s) in model.nodes().iter().zip(loads).skip(1) {
        let (_, variance) = linearize_one(s, flat, sigma).expect("flat profile is nonzero");
        slots.push(MeasurementSlot {
            kind: MeasurementKind::LoadCurrent,
            node: node.id,
            variance,
        });
    }
    Ok(slots)
}

/// Estimated state: root voltage plus branch currents in model branch order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub root_voltage: Complex64,
    pub branch_currents: Vec<Complex64>,
}

impl StateVector {
    /// Interleaved real vector in the documented column order.
    pub fn to_real(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 + 2 * self.branch_currents.len());
        out.push(self.root_voltage.re);
        out.push(self.root_voltage.im);
        for i in &self.branch_currents {
            out.push(i.re);
            out.push(i.im);
        }
        out
    }

    pub fn from_real(x: &[f64]) -> Self {
        assert!(x.len() >= 2 && x.len() % 2 == 0, "state length must be even");
        Self {
            root_voltage: Complex64::new(x[0], x[1]),
            branch_currents: x[2..].chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(),
        }
    }

    /// Node voltages (model node order) by accumulating drops from the root.
    pub fn node_voltages(&self, model: &GridModel) -> Vec<Complex64> {
        let topo = model.topology();
        let mut v = vec![Complex64::new(0.0, 0.0); model.nodes().len()];
        v[0] = self.root_voltage;
        for &n in topo.order.iter().skip(1) {
            let b = topo.parent_branch[n].expect("non-root node has a parent");
            let parent = topo.branch_from[b];
            v[n] = v[parent] - model.branches()[b].impedance * self.branch_currents[b];
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub state: StateVector,
    /// Node voltages in model node order.
    pub node_voltages: Vec<Complex64>,
    /// Weighted residual norm `sqrt(r' W r)`.
    pub residual_norm: f64,
    pub solve_time: Duration,
    /// Number of linear solves performed (one per linearization pass).
    pub solves: usize,
}

/// Measurement Jacobian, weights and the factorized gain matrix for one
/// measurement configuration.
#[derive(Debug, Clone)]
pub struct GainCache {
    model: GridModel,
    slots: Vec<MeasurementSlot>,
    h: DMatrix<f64>,
    weights: DVector<f64>,
    gain: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

/// Number of real state components for a model.
pub fn state_dim(model: &GridModel) -> usize {
    2 + 2 * model.branches().len()
}

/// Assembles the measurement Jacobian for a configuration.
pub fn jacobian(model: &GridModel, slots: &[MeasurementSlot]) -> Result<DMatrix<f64>, WlsError> {
    let topo = model.topology();
    let mut h = DMatrix::zeros(2 * slots.len(), state_dim(model));
    for (m, slot) in slots.iter().enumerate() {
        let k = model.index_of(slot.node).ok_or(WlsError::UnknownNode(slot.node))?;
        let (re, im) = (2 * m, 2 * m + 1);
        match slot.kind {
            MeasurementKind::VoltagePhasor => {
                h[(re, 0)] = 1.0;
                h[(im, 1)] = 1.0;
                for b in topo.path_to(k) {
                    let z = model.branches()[b].impedance;
                    let (cr, ci) = (2 + 2 * b, 3 + 2 * b);
                    h[(re, cr)] -= z.re;
                    h[(re, ci)] += z.im;
                    h[(im, cr)] -= z.im;
                    h[(im, ci)] -= z.re;
                }
            }
            MeasurementKind::LoadCurrent => {
                let parent = topo.parent_branch[k].ok_or(WlsError::RootInjection(slot.node))?;
                h[(re, 2 + 2 * parent)] = 1.0;
                h[(im, 3 + 2 * parent)] = 1.0;
                for &b in &topo.children[k] {
                    h[(re, 2 + 2 * b)] = -1.0;
                    h[(im, 3 + 2 * b)] = -1.0;
                }
            }
        }
    }
    Ok(h)
}

/// Builds and factorizes the gain matrix for a measurement configuration.
pub fn build_gain(model: &GridModel, slots: &[MeasurementSlot]) -> Result<GainCache, WlsError> {
    if slots.is_empty() {
        return Err(WlsError::Empty);
    }
    for (index, s) in slots.iter().enumerate() {
        if !(s.variance > 0.0 && s.variance.is_finite()) {
            return Err(WlsError::BadVariance { index });
        }
    }
    let h = jacobian(model, slots)?;
    let weights = DVector::from_iterator(
        h.nrows(),
        slots.iter().flat_map(|s| [1.0 / s.variance, 1.0 / s.variance]),
    );
    let states = h.ncols();

    let mut scaled = h.clone();
    for (mut row, w) in scaled.row_iter_mut().zip(weights.iter()) {
        row *= w.sqrt();
    }
    let singular = scaled.svd(false, false).singular_values;
    let largest = singular.max();
    let rank = singular.iter().filter(|&&s| s > RANK_TOLERANCE * largest).count();
    if rank < states {
        return Err(WlsError::Unobservable {
            deficiency: states - rank,
            states,
        });
    }

    let gain = h.transpose() * DMatrix::from_diagonal(&weights) * &h;
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    let factor = Cholesky::new(gain.clone()).ok_or(WlsError::Unobservable {
        deficiency: 1,
        states,
    })?;
    Ok(GainCache {
        model: model.clone(),
        slots: slots.to_vec(),
        h,
        weights,
        gain,
        factor,
    })
}

/// Options for repeated relinearization of the load-current rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelinearizeOptions {
    pub max_passes: usize,
    /// Stop when the largest node-voltage change between passes is below this.
    pub tolerance: f64,
}

impl Default for RelinearizeOptions {
    fn default() -> Self {
        Self {
            max_passes: 20,
            tolerance: 1e-10,
        }
    }
}

impl GainCache {
    pub fn model(&self) -> &GridModel {
        &self.model
    }

    pub fn slots(&self) -> &[MeasurementSlot] {
        &self.slots
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    fn check(&self, z: &MeasurementSet) -> Result<(), WlsError> {
        if z.entries.len() != self.slots.len() {
            return Err(WlsError::ConfigMismatch(format!(
                "expected {} measurements, got {}",
                self.slots.len(),
                z.entries.len()
            )));
        }
        for (index, (m, s)) in z.entries.iter().zip(&self.slots).enumerate() {
            if m.kind != s.kind || m.node != s.node {
                return Err(WlsError::ConfigMismatch(format!(
                    "measurement {index} is {:?} at node {}, configuration expects {:?} at node {}",
                    m.kind, m.node, s.kind, s.node
                )));
            }
            if !m.value.re.is_finite() || !m.value.im.is_finite() {
                return Err(WlsError::NonFinite { index });
            }
        }
        Ok(())
    }

    fn solve(&self, z: &MeasurementSet) -> (StateVector, f64) {
        let zv = DVector::from_iterator(
            self.h.nrows(),
            z.entries.iter().flat_map(|m| [m.value.re, m.value.im]),
        );
        let rhs = self.h.transpose() * self.weights.component_mul(&zv);
        let x = self.factor.solve(&rhs);
        let r = &zv - &self.h * &x;
        let residual = r.component_mul(&r).dot(&self.weights).sqrt();
        (StateVector::from_real(x.as_slice()), residual)
    }

    /// One WLS solve with the cached factorization. Weights are those the
    /// cache was built with; only the measured values are taken from `z`.
    pub fn estimate(&self, z: &MeasurementSet) -> Result<EstimationResult, WlsError> {
        self.check(z)?;
        let start = Instant::now();
        let (state, residual_norm) = self.solve(z);
        let node_voltages = state.node_voltages(&self.model);
        Ok(EstimationResult {
            state,
            node_voltages,
            residual_norm,
            solve_time: start.elapsed(),
            solves: 1,
        })
    }

    /// Repeats the solve, re-linearizing every load-current row around the
    /// previous estimate from the demands in `loads`, until node voltages
    /// settle. The first pass uses the values already in `z`. The gain is
    /// never refactorized.
    pub fn estimate_relinearized(
        &self,
        z: &MeasurementSet,
        loads: &BTreeMap<NodeId, Complex64>,
        options: RelinearizeOptions,
    ) -> Result<EstimationResult, WlsError> {
        self.check(z)?;
        let start = Instant::now();
        let mut z = z.clone();
        let (mut state, mut residual) = self.solve(&z);
        let mut voltages = state.node_voltages(&self.model);
        let mut solves = 1;
        while solves < options.max_passes.max(1) {
            for m in z.entries.iter_mut().filter(|m| m.kind == MeasurementKind::LoadCurrent) {
                let Some(&s) = loads.get(&m.node) else { continue };
                let v = voltages[self.model.index_of(m.node).expect("checked at build")];
                if v.norm() < MIN_GUESS_MAGNITUDE {
                    return Err(WlsError::ZeroVoltage(m.node));
                }
                m.value = (s / v).conj();
            }
            let (next, next_residual) = self.solve(&z);
            let next_voltages = next.node_voltages(&self.model);
            solves += 1;
            let change = voltages
                .iter()
                .zip(&next_voltages)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            state = next;
            residual = next_residual;
            voltages = next_voltages;
            if change < options.tolerance {
                break;
            }
        }
        Ok(EstimationResult {
            state,
            node_voltages: voltages,
            residual_norm: residual,
            solve_time: start.elapsed(),
            solves,
        })
    }
}
