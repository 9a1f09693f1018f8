//! Backward/forward sweep power flow for radial feeders.
//!
//! Loads are constant-power. Each iteration computes load currents from the
//! present voltage estimate, accumulates branch currents leaf-to-root, then
//! propagates voltage drops root-to-leaf starting from the Thevenin source.

use thiserror::Error;

use crate::grid::{GridModel, NodeId};
use crate::Complex64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Convergence threshold on the largest voltage change between sweeps.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerFlowError {
    #[error("sweep did not converge after {iterations} iterations (last change {last_change:.3e} pu); loading is likely infeasible")]
    NotConverged { iterations: usize, last_change: f64 },
    #[error("voltage collapsed to zero at node {0}")]
    VoltageCollapse(NodeId),
    #[error("expected {expected} loads, got {got}")]
    LoadCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// Node voltages in model node order.
    pub voltages: Vec<Complex64>,
    /// Branch currents (from-node to to-node) in model branch order.
    pub branch_currents: Vec<Complex64>,
    /// Current drawn from the source into the root node.
    pub source_current: Complex64,
    pub iterations: usize,
}

impl PowerFlowSolution {
    pub fn voltage(&self, model: &GridModel, id: NodeId) -> Option<Complex64> {
        model.index_of(id).map(|i| self.voltages[i])
    }
}

/// Solves the model with its own loads.
pub fn solve_radial_power_flow(model: &GridModel) -> Result<PowerFlowSolution, PowerFlowError> {
    solve_with_loads(model, &model.loads(), SweepOptions::default())
}

/// Solves the model with an explicit per-node load vector (model node order).
pub fn solve_with_loads(
    model: &GridModel,
    loads: &[Complex64],
    options: SweepOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = model.nodes().len();
    if loads.len() != n {
        return Err(PowerFlowError::LoadCount {
            expected: n,
            got: loads.len(),
        });
    }
    let topo = model.topology();
    let emf = model.slack_voltage().to_rect();
    let mut voltages = vec![emf; n];
    let mut currents = vec![Complex64::new(0.0, 0.0); model.branches().len()];
    let mut source_current = Complex64::new(0.0, 0.0);
    let mut last_change = f64::INFINITY;

    for iteration in 1..=options.max_iterations {
        source_current = backward_sweep(model, loads, &voltages, &mut currents)?;
        last_change = forward_sweep(model, source_current, &currents, &mut voltages);
        if last_change < options.tolerance {
            // Re-derive currents from the converged voltages so KCL holds exactly.
            source_current = backward_sweep(model, loads, &voltages, &mut currents)?;
            debug_assert_eq!(topo.order.len(), n);
            return Ok(PowerFlowSolution {
                voltages,
                branch_currents: currents,
                source_current,
                iterations: iteration,
            });
        }
    }
    let _ = source_current;
    Err(PowerFlowError::NotConverged {
        iterations: options.max_iterations,
        last_change,
    })
}

/// Load current drawn at a node, `conj(S / V)`.
pub fn load_current(load: Complex64, voltage: Complex64) -> Complex64 {
    if load == Complex64::new(0.0, 0.0) {
        Complex64::new(0.0, 0.0)
    } else {
        (load / voltage).conj()
    }
}

fn backward_sweep(
    model: &GridModel,
    loads: &[Complex64],
    voltages: &[Complex64],
    currents: &mut [Complex64],
) -> Result<Complex64, PowerFlowError> {
    let topo = model.topology();
    for &node in topo.order.iter().rev() {
        if voltages[node].norm() == 0.0 {
            return Err(PowerFlowError::VoltageCollapse(model.nodes()[node].id));
        }
        let mut total = load_current(loads[node], voltages[node]);
        for &child in &topo.children[node] {
            total += currents[child];
        }
        match topo.parent_branch[node] {
            Some(b) => currents[b] = total,
            None => return Ok(total),
        }
    }
    unreachable!("breadth-first order always ends at the root")
}

fn forward_sweep(
    model: &GridModel,
    source_current: Complex64,
    currents: &[Complex64],
    voltages: &mut [Complex64],
) -> f64 {
    let topo = model.topology();
    let branches = model.branches();
    let mut change: f64 = 0.0;
    let root = model.slack_voltage().to_rect() - model.source_impedance() * source_current;
    change = change.max((root - voltages[0]).norm());
    voltages[0] = root;
    for &node in topo.order.iter().skip(1) {
        let b = topo.parent_branch[node].expect("non-root node has a parent");
        let v = voltages[topo.branch_from[b]] - branches[b].impedance * currents[b];
        change = change.max((v - voltages[node]).norm());
        voltages[node] = v;
    }
    change
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Node};
    use crate::phasor::Phasor;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_bus(load: Complex64) -> GridModel {
        GridModel::new(
            "two-bus",
            vec![
                Node { id: 1, load: c(0.0, 0.0), label: None },
                Node { id: 2, load, label: None },
            ],
            vec![Branch { from: 1, to: 2, impedance: c(0.01, 0.02) }],
            Phasor::new(1.0, 0.0),
            c(0.0, 0.0),
        )
        .unwrap()
    }

    /// Closed form for a single line feeding a constant-power load from a
    /// fixed 1∠0 source: |V2|⁴ + (2(RP + XQ) − 1)|V2|² + |Z|²|S|² = 0 picks
    /// the high-voltage root, then conj(V2) = Z·conj(S) + |V2|².
    fn two_bus_closed_form(z: Complex64, s: Complex64) -> Complex64 {
        let b = 2.0 * (z.re * s.re + z.im * s.im) - 1.0;
        let c0 = z.norm_sqr() * s.norm_sqr();
        let v2sq = (-b + (b * b - 4.0 * c0).sqrt()) / 2.0;
        (z * s.conj() + v2sq).conj()
    }

    #[test]
    fn no_load_identity() {
        let mut model = GridModel::ieee13_balanced();
        let zero = vec![c(0.0, 0.0); model.nodes().len()];
        let sol = solve_with_loads(&model, &zero, SweepOptions::default()).unwrap();
        let slack = model.slack_voltage().to_rect();
        assert!(sol.voltages.iter().all(|v| *v == slack));
        assert!(sol.branch_currents.iter().all(|i| *i == c(0.0, 0.0)));
        model = two_bus(c(0.0, 0.0));
        let sol = solve_radial_power_flow(&model).unwrap();
        assert_eq!(sol.voltages, vec![c(1.0, 0.0); 2]);
    }

    #[test]
    fn two_bus_matches_closed_form() {
        let s = c(0.5, 0.1);
        let model = two_bus(s);
        let sol = solve_radial_power_flow(&model).unwrap();
        let expected = two_bus_closed_form(c(0.01, 0.02), s);
        assert!((sol.voltages[1] - expected).norm() < 1e-12, "{} vs {expected}", sol.voltages[1]);
        // The defining relation V2·conj(V1 − V2) = conj(Z)·S.
        let lhs = sol.voltages[1] * (sol.voltages[0] - sol.voltages[1]).conj();
        assert!((lhs - c(0.01, -0.02) * s).norm() < 1e-12);
    }

    #[test]
    fn kcl_and_drop_residuals() {
        let model = GridModel::ieee13_balanced();
        let sol = solve_radial_power_flow(&model).unwrap();
        let topo = model.topology();
        for (i, node) in model.nodes().iter().enumerate() {
            let inflow = match topo.parent_branch[i] {
                Some(b) => sol.branch_currents[b],
                None => sol.source_current,
            };
            let outflow: Complex64 = topo.children[i].iter().map(|&b| sol.branch_currents[b]).sum();
            let residual = inflow - outflow - load_current(node.load, sol.voltages[i]);
            assert!(residual.norm() < 1e-10, "KCL at {}: {residual}", node.id);
        }
        for (b, br) in model.branches().iter().enumerate() {
            let drop = sol.voltages[topo.branch_from[b]] - sol.voltages[topo.branch_to[b]];
            assert!((drop - br.impedance * sol.branch_currents[b]).norm() < 1e-10);
        }
        let root = model.slack_voltage().to_rect() - model.source_impedance() * sol.source_current;
        assert!((root - sol.voltages[0]).norm() < 1e-10);
    }

    #[test]
    fn bundled_feeder_profile_is_plausible() {
        let model = GridModel::ieee13_balanced();
        let sol = solve_radial_power_flow(&model).unwrap();
        for v in &sol.voltages {
            assert!(v.norm() > 0.9 && v.norm() < 1.06, "{}", v.norm());
        }
        assert!(sol.iterations < 20);
    }

    #[test]
    fn generation_raises_local_voltage() {
        let model = GridModel::ieee13_balanced();
        let base = solve_radial_power_flow(&model).unwrap();
        let mut loads = model.loads();
        let at = model.index_of(75).unwrap();
        loads[at] += c(-0.3, 0.0);
        let after = solve_with_loads(&model, &loads, SweepOptions::default()).unwrap();
        assert!(after.voltages[at].norm() > base.voltages[at].norm());
    }

    #[test]
    fn more_load_never_raises_downstream_voltage() {
        let model = GridModel::ieee13_balanced();
        let base = solve_radial_power_flow(&model).unwrap();
        for (i, _) in model.nodes().iter().enumerate() {
            let mut loads = model.loads();
            loads[i] += c(0.05, 0.0);
            let after = solve_with_loads(&model, &loads, SweepOptions::default()).unwrap();
            for n in model.topology().subtree(i) {
                assert!(after.voltages[n].norm() <= base.voltages[n].norm() + 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_loading_reports_non_convergence() {
        let model = two_bus(c(30.0, 10.0));
        let err = solve_radial_power_flow(&model).unwrap_err();
        assert!(matches!(err, PowerFlowError::NotConverged { iterations: 100, .. } | PowerFlowError::VoltageCollapse(_)));
    }

    #[test]
    fn deterministic() {
        let model = GridModel::ieee13_balanced();
        assert_eq!(
            solve_radial_power_flow(&model).unwrap(),
            solve_radial_power_flow(&model).unwrap()
        );
    }
}
