//! Trajectories under the feedback law and the cost functionals.
//!
//! The state moves as `X_{k+1} = X_k + u_k dt`; the step cost charged at a
//! level-`k` node is `nu_k dt (X_{k+1} - xi_k)^2 + kappa_k u_k^2 dt`, and the
//! terminal penalty is `eta (X_N - xi_t)^2`. The feedback law is
//! `u = (c/kappa)(xi_hat - X)`.
//!
//! With `C_k = (running cost before k) + c_k (X_k - xi_hat_k)^2` one step of
//! any policy satisfies
//!
//! ```text
//! E[C_{k+1} - C_k | k] = nu dt (xi - xi_hat)^2 + E[c_{k+1} (xi_hat_{k+1} - xi_hat)^2]
//!                        + (kappa / rho) (u - u_fb)^2 dt,
//! ```
//!
//! so with mismatch weight `kappa / rho` the remainder `M` is an exact
//! martingale ([`Convention::DiscreteExact`]). Weighting the mismatch by
//! `kappa` alone ([`Convention::Continuum`]) leaves a drift of order `dt^2`
//! per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::lattice::{agree, NodeId, ScenarioTree};
use crate::oracle::QuadraticValue;
use crate::riccati::RiccatiSolution;
use crate::signal::SignalProcess;

/// Default tolerance on `|X_N - xi_t|` where the penalty is infinite.
pub const DEFAULT_CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    Feedback,
    Oracle,
    Perturbed,
    Custom,
}

#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub policy: PolicyTag,
    pub fingerprint: (usize, usize, usize, u64),
    /// State per node on levels `0..N`.
    pub x: Vec<f64>,
    /// Control per node on levels `0..N-1`.
    pub u: Vec<f64>,
}

impl TrajectoryBundle {
    /// `X_N` seen from a level-`N-1` node.
    pub fn terminal_state(&self, tree: &ScenarioTree, id: NodeId) -> f64 {
        self.x[id] + self.u[id] * tree.grid().dt()
    }

    /// Largest `|X_N - xi_t|` over level-`N-1` nodes with infinite penalty.
    pub fn max_constraint_gap(&self, tree: &ScenarioTree, coeffs: &CoefficientSet) -> f64 {
        tree.level(tree.steps() - 1)
            .enumerate()
            .filter(|(i, _)| coeffs.eta[*i].is_infinite())
            .map(|(i, id)| (self.terminal_state(tree, id) - coeffs.xi_t[i]).abs())
            .fold(0.0, f64::max)
    }
}

/// Runs a policy `u = f(node, X)` forward from `x0`.
///
/// On recombining layouts all parents of a node must deliver the same state,
/// otherwise the trajectory is path dependent and cannot be stored per node.
/// Terminal nodes are exempt: their slot is `NaN` where parents disagree, and
/// costs always take `X_N` from the level-`N-1` parent.
pub fn simulate<F>(
    tree: &ScenarioTree,
    x0: f64,
    policy: PolicyTag,
    f: F,
) -> Result<TrajectoryBundle>
where
    F: Fn(NodeId, f64) -> f64,
{
    let n = tree.steps();
    let dt = tree.grid().dt();
    let mut x = vec![f64::NAN; tree.prefix_len(n)];
    let mut u = vec![0.0; tree.prefix_len(n - 1)];
    let mut seen = vec![false; x.len()];
    x[0] = x0;
    seen[0] = true;
    for k in 0..n {
        for id in tree.level(k) {
            let uk = f(id, x[id]);
            u[id] = uk;
            let next = x[id] + uk * dt;
            for e in tree.children(id) {
                if seen[e.child] {
                    if k == n - 1 {
                        // X_N is read from the level-(N-1) parent; the
                        // merged terminal slot only keeps an agreed value
                        if !agree(x[e.child], next) {
                            x[e.child] = f64::NAN;
                        }
                    } else if !agree(x[e.child], next) {
                        return Err(Error::PathDependent {
                            quantity: "state",
                            node: e.child,
                        });
                    }
                } else {
                    x[e.child] = next;
                    seen[e.child] = true;
                }
            }
        }
    }
    Ok(TrajectoryBundle {
        policy,
        fingerprint: tree.fingerprint(),
        x,
        u,
    })
}

#[inline]
fn feedback_control(c: f64, kappa: f64, xi_hat: f64, x: f64) -> f64 {
    c / kappa * (xi_hat - x)
}

pub fn simulate_feedback(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
) -> Result<TrajectoryBundle> {
    simulate(tree, coeffs.x0, PolicyTag::Feedback, |id, x| {
        feedback_control(
            riccati.c.values[id],
            coeffs.kappa.values[id],
            signal.xi_hat.values[id],
            x,
        )
    })
}

/// Feedback plus a fixed node-local bump.
pub fn simulate_perturbed(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
    bumps: &[f64],
) -> Result<TrajectoryBundle> {
    if bumps.len() != tree.prefix_len(tree.steps() - 1) {
        return Err(Error::InvalidInput(
            "one bump per pre-terminal node is required".into(),
        ));
    }
    simulate(tree, coeffs.x0, PolicyTag::Perturbed, |id, x| {
        feedback_control(
            riccati.c.values[id],
            coeffs.kappa.values[id],
            signal.xi_hat.values[id],
            x,
        ) + bumps[id]
    })
}

pub fn simulate_oracle(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    value: &QuadraticValue,
) -> Result<TrajectoryBundle> {
    simulate(tree, coeffs.x0, PolicyTag::Oracle, |id, x| {
        value.control(id, x)
    })
}

/// Open-loop control table, one value per pre-terminal node.
pub fn simulate_custom(tree: &ScenarioTree, x0: f64, table: &[f64]) -> Result<TrajectoryBundle> {
    if table.len() != tree.prefix_len(tree.steps() - 1) {
        return Err(Error::InvalidInput(
            "one control per pre-terminal node is required".into(),
        ));
    }
    simulate(tree, x0, PolicyTag::Custom, |id, _| table[id])
}

/// Random bump tables: each node on levels `levels` is bumped with
/// probability `density` by a uniform draw from `[-scale, scale]`.
pub fn perturbation_family(
    tree: &ScenarioTree,
    count: usize,
    seed: u64,
    scale: f64,
    density: f64,
    levels: std::ops::Range<usize>,
) -> Vec<Vec<f64>> {
    let len = tree.prefix_len(tree.steps() - 1);
    (0..count)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut bumps = vec![0.0; len];
            for k in levels.clone() {
                for id in tree.level(k) {
                    if rng.gen::<f64>() < density {
                        bumps[id] = rng.gen_range(-scale..=scale);
                    }
                }
            }
            // never return the unperturbed policy
            if bumps.iter().all(|&b| b == 0.0) && !levels.is_empty() {
                bumps[tree.level(levels.start).start] = scale;
            }
            bumps
        })
        .collect()
}

fn step_cost(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    traj: &TrajectoryBundle,
    id: NodeId,
) -> f64 {
    let dt = tree.grid().dt();
    let u = traj.u[id];
    let next = traj.x[id] + u * dt;
    let d = next - coeffs.xi.values[id];
    coeffs.nu.values[id] * dt * d * d + coeffs.kappa.values[id] * u * u * dt
}

/// Expected running cost over steps `0..k_bar`.
fn running_cost(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    traj: &TrajectoryBundle,
    k_bar: usize,
) -> f64 {
    (0..k_bar)
        .map(|k| tree.expect_level(k, |id| step_cost(tree, coeffs, traj, id)))
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct ViolationWitness {
    pub node: NodeId,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JEta {
    /// `+inf` when a constrained terminal state misses its target.
    pub value: f64,
    pub witness: Option<ViolationWitness>,
    pub max_constraint_gap: f64,
}

pub fn evaluate_j_eta(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    traj: &TrajectoryBundle,
    tol: f64,
) -> JEta {
    let n = tree.steps();
    let mut witness: Option<ViolationWitness> = None;
    let mut max_gap: f64 = 0.0;
    let mut terminal = 0.0;
    for (i, id) in tree.level(n - 1).enumerate() {
        let gap = traj.terminal_state(tree, id) - coeffs.xi_t[i];
        match coeffs.eta[i] {
            crate::coefficients::Penalty::Finite(e) => {
                terminal += tree.node(id).probability * e * gap * gap;
            }
            crate::coefficients::Penalty::Infinite => {
                max_gap = max_gap.max(gap.abs());
                if gap.abs() > tol && witness.as_ref().map_or(true, |w| gap.abs() > w.gap) {
                    witness = Some(ViolationWitness {
                        node: id,
                        gap: gap.abs(),
                    });
                }
            }
        }
    }
    let value = if witness.is_some() {
        f64::INFINITY
    } else {
        running_cost(tree, coeffs, traj, n) + terminal
    };
    JEta {
        value,
        witness,
        max_constraint_gap: max_gap,
    }
}

/// Cost with every penalty replaced by `eta ^ n`.
pub fn evaluate_j_n(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    traj: &TrajectoryBundle,
    n: f64,
) -> f64 {
    let steps = tree.steps();
    let terminal: f64 = tree
        .level(steps - 1)
        .enumerate()
        .map(|(i, id)| {
            let gap = traj.terminal_state(tree, id) - coeffs.xi_t[i];
            tree.node(id).probability * coeffs.eta[i].truncated(n) * gap * gap
        })
        .sum();
    running_cost(tree, coeffs, traj, steps) + terminal
}

/// `c_N (X_N - xi_t)^2` at a level-`N-1` node, with the constrained reading
/// `0` or `+inf` for an infinite weight.
fn terminal_term(cn: f64, gap: f64, tol: f64) -> f64 {
    if cn == f64::INFINITY {
        if gap.abs() <= tol {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        cn * gap * gap
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JcReport {
    pub value: f64,
    /// `(k_bar, E[running cost before k_bar + c_{k_bar} (X - xi_hat)^2])`.
    pub table: Vec<(usize, f64)>,
}

/// Auxiliary functional over a trailing window of truncation times
/// `k_bar = N, N-1, ..., N-window+1`; the value is the window maximum.
/// At `k_bar = N` the weight is the terminal weight and the signal is the
/// terminal target.
pub fn evaluate_j_c(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
    traj: &TrajectoryBundle,
    window: usize,
    tol: f64,
) -> JcReport {
    let n = tree.steps();
    let lowest = n.saturating_sub(window.max(1) - 1);
    let mut table = Vec::new();
    let mut run = running_cost(tree, coeffs, traj, lowest);
    for k_bar in lowest..=n {
        if k_bar > lowest {
            run += tree.expect_level(k_bar - 1, |id| step_cost(tree, coeffs, traj, id));
        }
        let pen = if k_bar == n {
            tree.level(n - 1)
                .enumerate()
                .map(|(i, id)| {
                    let gap = traj.terminal_state(tree, id) - coeffs.xi_t[i];
                    let t = terminal_term(riccati.terminal[i], gap, tol);
                    if t == 0.0 {
                        0.0
                    } else {
                        tree.node(id).probability * t
                    }
                })
                .sum()
        } else {
            tree.expect_level(k_bar, |id| {
                let d = traj.x[id] - signal.xi_hat.values[id];
                riccati.c.values[id] * d * d
            })
        };
        table.push((k_bar, run + pen));
    }
    table.reverse();
    let value = table.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    JcReport { value, table }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ValueFormula {
    pub initial: f64,
    pub tracking: f64,
    pub signal_variation: f64,
    pub total: f64,
}

/// Expected `nu dt (xi - xi_hat)^2` plus right-endpoint signal variation at
/// one node; the terminal variation vanishes where the weight is infinite.
fn node_drift_terms(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
    id: NodeId,
) -> (f64, f64) {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let xh = signal.xi_hat.values[id];
    let d = coeffs.xi.values[id] - xh;
    let tracking = coeffs.nu.values[id] * dt * d * d;
    let variation = if tree.node(id).level == n - 1 {
        let i = tree.index_in_level(id);
        let cn = riccati.terminal[i];
        if cn == f64::INFINITY {
            0.0
        } else {
            let g = coeffs.xi_t[i] - xh;
            cn * g * g
        }
    } else {
        tree.children(id)
            .iter()
            .map(|e| {
                let g = signal.xi_hat.values[e.child] - xh;
                e.prob * riccati.c.values[e.child] * g * g
            })
            .sum()
    };
    (tracking, variation)
}

/// `c_0 (x0 - xi_hat_0)^2 + E[sum nu dt (xi - xi_hat)^2] + E[sum c_{k+1} (dxi_hat)^2]`.
pub fn optimal_value_formula(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
) -> ValueFormula {
    let d0 = coeffs.x0 - signal.root();
    let initial = riccati.root() * d0 * d0;
    let mut tracking = 0.0;
    let mut signal_variation = 0.0;
    for k in 0..tree.steps() {
        let (t, v) = (
            tree.expect_level(k, |id| {
                node_drift_terms(tree, coeffs, riccati, signal, id).0
            }),
            tree.expect_level(k, |id| {
                node_drift_terms(tree, coeffs, riccati, signal, id).1
            }),
        );
        tracking += t;
        signal_variation += v;
    }
    ValueFormula {
        initial,
        tracking,
        signal_variation,
        total: initial + tracking + signal_variation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Mismatch weight `kappa / rho = kappa + (m + nu dt) dt`; `M` is an
    /// exact martingale.
    DiscreteExact,
    /// Mismatch weight `kappa`.
    Continuum,
}

#[derive(Debug, Clone)]
pub struct PathProcesses {
    /// `C`, `A`, `M` per node on levels `0..N`.
    pub c: Vec<f64>,
    pub a: Vec<f64>,
    pub m: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub convention: Convention,
    pub initial: f64,
    pub tracking: f64,
    pub signal_variation: f64,
    pub mismatch: f64,
    /// `E[C_N]`.
    pub expected_terminal: f64,
    /// `E[dM | node]` per node on levels `0..N-1`.
    pub martingale_drift: Vec<f64>,
    pub max_martingale_drift: f64,
    /// Edges on which `A` decreased (must be zero).
    pub a_decreases: usize,
    /// Per-path processes, or why they are unavailable.
    pub paths: std::result::Result<PathProcesses, String>,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.initial + self.tracking + self.signal_variation + self.mismatch
    }
}

#[allow(clippy::too_many_arguments)]
pub fn decompose_costs(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
    traj: &TrajectoryBundle,
    convention: Convention,
    tol: f64,
) -> Decomposition {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let len = tree.prefix_len(n - 1);
    // per-edge increments of C and A
    let mut dc = vec![0.0; tree.edges().len()];
    let mut da = vec![0.0; tree.edges().len()];
    let mut drift = vec![0.0; len];
    let (mut tracking, mut variation, mut mismatch) = (0.0, 0.0, 0.0);
    let mut a_decreases = 0;
    let mut expected_terminal = 0.0;
    for k in 0..n {
        for id in tree.level(k) {
            let p = tree.node(id).probability;
            let x = traj.x[id];
            let u = traj.u[id];
            let xh = signal.xi_hat.values[id];
            let c = riccati.c.values[id];
            let kappa = coeffs.kappa.values[id];
            let now = c * (x - xh) * (x - xh);
            let run = step_cost(tree, coeffs, traj, id);
            let u_fb = feedback_control(c, kappa, xh, x);
            let rho = riccati.retention[id];
            let mis = if rho == 0.0 {
                // forced last step: any miss is infinitely expensive
                let gap = traj.terminal_state(tree, id) - coeffs.xi_t[tree.index_in_level(id)];
                terminal_term(f64::INFINITY, gap, tol)
            } else {
                let w = match convention {
                    Convention::DiscreteExact => kappa / rho,
                    Convention::Continuum => kappa,
                };
                w * (u - u_fb) * (u - u_fb) * dt
            };
            let (tr, _) = node_drift_terms(tree, coeffs, riccati, signal, id);
            let next_x = x + u * dt;
            let mut mean_dc = 0.0;
            let mut mean_da = 0.0;
            for eid in tree.edge_ids(id) {
                let e = tree.edge(eid);
                let (later, var) = if k == n - 1 {
                    let i = tree.index_in_level(id);
                    let cn = riccati.terminal[i];
                    let target = coeffs.xi_t[i];
                    let var = if cn == f64::INFINITY {
                        0.0
                    } else {
                        cn * (target - xh) * (target - xh)
                    };
                    (terminal_term(cn, next_x - target, tol), var)
                } else {
                    let xc = signal.xi_hat.values[e.child];
                    let cc = riccati.c.values[e.child];
                    (
                        cc * (next_x - xc) * (next_x - xc),
                        cc * (xc - xh) * (xc - xh),
                    )
                };
                dc[eid] = run + later - now;
                da[eid] = tr + var + mis;
                if da[eid] < 0.0 {
                    a_decreases += 1;
                }
                mean_dc += e.prob * dc[eid];
                mean_da += e.prob * da[eid];
                variation += p * e.prob * var;
                if k == n - 1 {
                    expected_terminal += p * e.prob * later;
                }
            }
            tracking += p * tr;
            mismatch += p * mis;
            drift[id] = mean_dc - mean_da;
        }
    }
    let d0 = coeffs.x0 - signal.root();
    let initial = riccati.root() * d0 * d0;
    expected_terminal += running_cost(tree, coeffs, traj, n);
    let max_martingale_drift = drift
        .iter()
        .filter(|d| d.is_finite())
        .fold(0.0_f64, |a, d| a.max(d.abs()));
    let paths = (|| -> Result<PathProcesses> {
        let c = tree.forward(n, initial, "cost process", |e, acc| acc + dc[e.id])?;
        let a = tree.forward(n, 0.0, "nondecreasing part", |e, acc| acc + da[e.id])?;
        let m = c.iter().zip(&a).map(|(c, a)| c - initial - a).collect();
        Ok(PathProcesses { c, a, m })
    })()
    .map_err(|e| e.to_string());
    Decomposition {
        convention,
        initial,
        tracking,
        signal_variation: variation,
        mismatch,
        expected_terminal,
        martingale_drift: drift,
        max_martingale_drift,
        a_decreases,
        paths,
    }
}
