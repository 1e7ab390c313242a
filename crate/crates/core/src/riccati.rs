//! The penalty weight `c`: closed forms, a deterministic ODE integrator and
//! the exact backward recursion on a scenario tree.
//!
//! On a tree the weight is the `x^2` coefficient of the value function. With
//! `m = E[c_{k+1} | node]` and `a = m + nu dt` one step gives
//!
//! ```text
//! rho_k = kappa / (kappa + a dt),    c_k = a rho_k,
//! ```
//!
//! starting from `c_N = eta ^ n` stored on level `N-1`. The retention factor
//! `rho` equals `1 - c dt / kappa`; it is stored directly because the
//! subtraction cancels badly when the terminal weight is huge. An infinite
//! terminal weight gives `c_{N-1} = kappa / dt` and `rho_{N-1} = 0`.

use serde::Serialize;

use crate::coefficients::{CoefficientSet, Penalty};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, NodeId, ScenarioTree, TimeGrid};
use crate::oracle::{self, OracleMode};

/// Largest truncation level accepted by the finite solver.
pub const MAX_TRUNCATION: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Terminal weight `eta ^ n`.
    Level(f64),
    /// Terminal weight `eta` itself, infinite where `eta` is.
    MinimalLimit,
}

impl Truncation {
    pub fn terminal(self, eta: Penalty) -> f64 {
        match self {
            Truncation::Level(n) => eta.truncated(n),
            Truncation::MinimalLimit => eta.as_f64(),
        }
    }

    pub fn label(self) -> String {
        match self {
            Truncation::Level(n) => format!("{n:e}"),
            Truncation::MinimalLimit => "minimal-limit".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub truncation: Truncation,
    /// `c` on levels `0..N-1`.
    pub c: AdaptedProcess,
    /// Terminal weight per level-`N-1` node, indexed by position in the level.
    pub terminal: Vec<f64>,
    /// `m_k = E[c_{k+1} | node]`; on level `N-1` this is the terminal weight.
    pub next_mean: Vec<f64>,
    /// Retention factor `rho_k = 1 - c_k dt / kappa_k` per node.
    pub retention: Vec<f64>,
    /// `c_child - m_parent` per edge; zero on edges leaving level `N-1`.
    pub martingale_increments: Vec<f64>,
}

/// One exact step: returns `(c, rho)`.
#[inline]
pub(crate) fn step(m: f64, nu: f64, kappa: f64, dt: f64) -> (f64, f64) {
    if m == f64::INFINITY {
        return (kappa / dt, 0.0);
    }
    let a = m + nu * dt;
    let rho = kappa / (kappa + a * dt);
    (a * rho, rho)
}

impl RiccatiSolution {
    pub fn root(&self) -> f64 {
        self.c.values[0]
    }

    pub fn terminal_at(&self, tree: &ScenarioTree, id: NodeId) -> f64 {
        self.terminal[tree.index_in_level(id)]
    }

    /// Re-evaluates the one-step recursion at every node and returns the
    /// largest relative mismatch.
    pub fn self_consistency(&self, tree: &ScenarioTree, coeffs: &CoefficientSet) -> f64 {
        let n = tree.steps();
        let dt = tree.grid().dt();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            for id in tree.level(k) {
                let m = if k == n - 1 {
                    self.terminal_at(tree, id)
                } else {
                    tree.children(id)
                        .iter()
                        .map(|e| e.prob * self.c.values[e.child])
                        .sum()
                };
                let (c, _) = step(m, coeffs.nu.values[id], coeffs.kappa.values[id], dt);
                let r = rel_diff(c, self.c.values[id]);
                worst = worst.max(r);
            }
        }
        worst
    }

    /// Largest `|E[increment | node]|` of the martingale part.
    pub fn martingale_mean_defect(&self, tree: &ScenarioTree) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..tree.steps().saturating_sub(1) {
            for id in tree.level(k) {
                let mean: f64 = tree
                    .edge_ids(id)
                    .map(|e| tree.edge(e).prob * self.martingale_increments[e])
                    .sum();
                worst = worst.max(mean.abs() / self.c.values[id].abs().max(f64::MIN_POSITIVE));
            }
        }
        worst
    }

    pub fn min_value(&self) -> f64 {
        self.c.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Exact backward recursion with terminal weight `eta ^ n`.
pub fn solve_discrete_bsrde(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    n: f64,
) -> Result<RiccatiSolution> {
    if !(n >= 0.0 && n <= MAX_TRUNCATION) {
        return Err(Error::InvalidInput(format!(
            "truncation level must lie in [0, {MAX_TRUNCATION:e}], got {n}"
        )));
    }
    solve(tree, coeffs, Truncation::Level(n))
}

/// Exact backward recursion with the untruncated terminal weight.
pub fn solve_minimal_limit(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
) -> Result<RiccatiSolution> {
    solve(tree, coeffs, Truncation::MinimalLimit)
}

pub fn solve(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    truncation: Truncation,
) -> Result<RiccatiSolution> {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let len = tree.prefix_len(n - 1);
    if coeffs.nu.values.len() != len || coeffs.eta.len() != tree.level(n - 1).len() {
        return Err(Error::InvalidInput(
            "coefficients belong to another tree".into(),
        ));
    }
    let terminal: Vec<f64> = coeffs.eta.iter().map(|&e| truncation.terminal(e)).collect();
    let mut c = vec![0.0; len];
    let mut next_mean = vec![0.0; len];
    let mut retention = vec![0.0; len];
    let mut martingale = vec![0.0; tree.edges().len()];
    for (i, id) in tree.level(n - 1).enumerate() {
        next_mean[id] = terminal[i];
    }
    for k in (0..n).rev() {
        for id in tree.level(k) {
            let m = if k == n - 1 {
                next_mean[id]
            } else {
                let m: f64 = tree.children(id).iter().map(|e| e.prob * c[e.child]).sum();
                next_mean[id] = m;
                for eid in tree.edge_ids(id) {
                    martingale[eid] = c[tree.edge(eid).child] - m;
                }
                m
            };
            let (ck, rho) = step(m, coeffs.nu.values[id], coeffs.kappa.values[id], dt);
            if !ck.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "weight overflows at node {id}; lower the truncation level"
                )));
            }
            c[id] = ck;
            retention[id] = rho;
        }
    }
    Ok(RiccatiSolution {
        truncation,
        c: AdaptedProcess::new(tree, n - 1, c)?,
        terminal,
        next_mean,
        retention,
        martingale_increments: martingale,
    })
}

#[derive(Debug, Clone)]
pub struct MonotoneLimit {
    /// Solution at the largest truncation level.
    pub solution: RiccatiSolution,
    /// `(n, c_0^(n))` for every level of the sequence.
    pub root_sequence: Vec<(f64, f64)>,
    /// Smallest node-wise increment `c^(n') - c^(n)` between consecutive levels.
    pub min_increment: f64,
    /// Relative root increment between the last two levels is below `1e-10`.
    pub converged: bool,
    /// Untruncated solution, present when some penalty is infinite.
    pub limit: Option<RiccatiSolution>,
    /// Relative gap at the root between the last level and the limit.
    pub limit_gap: f64,
    /// Largest relative difference between the limit and the constrained
    /// dynamic program's quadratic coefficient.
    pub oracle_gap: f64,
}

/// Runs the recursion along an increasing sequence of truncation levels and
/// checks monotonicity node by node.
pub fn minimal_supersolution(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    levels: &[f64],
) -> Result<MonotoneLimit> {
    if levels.is_empty() {
        return Err(Error::InvalidInput("empty truncation sequence".into()));
    }
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(
            "truncation levels must be strictly increasing".into(),
        ));
    }
    let mut prev: Option<RiccatiSolution> = None;
    let mut root_sequence = Vec::with_capacity(levels.len());
    let mut min_increment = f64::INFINITY;
    for &n in levels {
        let sol = solve_discrete_bsrde(tree, coeffs, n)?;
        if let Some(p) = &prev {
            for (id, (&a, &b)) in p.c.values.iter().zip(&sol.c.values).enumerate() {
                let inc = b - a;
                min_increment = min_increment.min(inc);
                if inc < -1e-14 * a.abs() {
                    return Err(Error::Consistency(format!(
                        "weight decreased from {a} to {b} at node {id} when raising truncation to {n}"
                    )));
                }
            }
        }
        root_sequence.push((n, sol.root()));
        prev = Some(sol);
    }
    let solution = prev.expect("nonempty sequence");
    let converged = match root_sequence.as_slice() {
        [.., (_, a), (_, b)] => rel_diff(*a, *b) < 1e-10,
        _ => false,
    };
    let (limit, limit_gap, oracle_gap) = if coeffs.has_infinite_penalty() {
        let lim = solve_minimal_limit(tree, coeffs)?;
        let gap = rel_diff(lim.root(), solution.root());
        let dp = oracle::dp_solve(tree, coeffs, OracleMode::Constrained)?;
        let og = lim
            .c
            .values
            .iter()
            .zip(&dp.alpha)
            .map(|(a, b)| rel_diff(*a, *b))
            .fold(0.0, f64::max);
        (Some(lim), gap, og)
    } else {
        (None, 0.0, 0.0)
    };
    Ok(MonotoneLimit {
        solution,
        root_sequence,
        min_increment: if min_increment.is_finite() {
            min_increment
        } else {
            0.0
        },
        converged,
        limit,
        limit_gap,
        oracle_gap,
    })
}

/// `c` discounted by the running product of retention factors.
#[derive(Debug, Clone)]
pub struct LProcess {
    /// `D_k = prod_{j<k} rho_j` on levels `0..N`.
    pub discount: Vec<f64>,
    /// Left-endpoint sums `sum_{j<k} c_j dt / kappa_j` on levels `0..N`.
    pub rate_sum: Vec<f64>,
    /// `L_k = c_k D_k` on levels `0..N-1`.
    pub l: AdaptedProcess,
    /// Terminal value per level-`N-1` node: `D_N c_N`, or `D_{N-1} kappa/dt`
    /// where the terminal weight is infinite.
    pub l_terminal: Vec<f64>,
}

pub fn compute_l(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
) -> Result<LProcess> {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let discount = tree.forward(n, 1.0, "discount", |e, d| d * riccati.retention[e.parent])?;
    let rate_sum = tree.forward(n, 0.0, "discount rate sum", |e, s| {
        s + riccati.c.values[e.parent] / coeffs.kappa.values[e.parent] * dt
    })?;
    let len = tree.prefix_len(n - 1);
    let l: Vec<f64> = (0..len)
        .map(|id| riccati.c.values[id] * discount[id])
        .collect();
    let l_terminal = tree
        .level(n - 1)
        .enumerate()
        .map(|(i, id)| {
            let cn = riccati.terminal[i];
            if cn == f64::INFINITY {
                discount[id] * coeffs.kappa.values[id] / dt
            } else {
                discount[id] * riccati.retention[id] * cn
            }
        })
        .collect();
    Ok(LProcess {
        discount,
        rate_sum,
        l: AdaptedProcess::new(tree, n - 1, l)?,
        l_terminal,
    })
}

impl LProcess {
    pub fn terminal_at(&self, tree: &ScenarioTree, id: NodeId) -> f64 {
        self.l_terminal[tree.index_in_level(id)]
    }

    /// `E[L_{k+1} | node] - L_k` per node on levels `0..N-1`, with `L_N = L_T`.
    pub fn drift(&self, tree: &ScenarioTree) -> Vec<f64> {
        let n = tree.steps();
        let mut out = vec![0.0; tree.prefix_len(n - 1)];
        for k in 0..n {
            for id in tree.level(k) {
                let next = if k == n - 1 {
                    self.terminal_at(tree, id)
                } else {
                    tree.children(id)
                        .iter()
                        .map(|e| e.prob * self.l.values[e.child])
                        .sum()
                };
                out[id] = next - self.l.values[id];
            }
        }
        out
    }

    /// Largest relative supermartingale violation `max(0, drift) / L`.
    pub fn supermartingale_violation(&self, tree: &ScenarioTree) -> f64 {
        self.drift(tree)
            .iter()
            .zip(&self.l.values)
            .map(|(d, l)| (d / l).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Constant-coefficient weight at time `t`:
/// `s (s tanh(r) + eta) / (s + eta tanh(r))` with `s = sqrt(nu kappa)` and
/// `r = sqrt(nu/kappa) (T - t)`; `s coth(r)` for infinite `eta`.
pub fn closed_form_constant(
    nu: f64,
    kappa: f64,
    eta: Penalty,
    t: f64,
    horizon: f64,
) -> Result<f64> {
    if !(t < horizon) {
        return Err(Error::InvalidInput(format!(
            "need t < T, got t = {t}, T = {horizon}"
        )));
    }
    if !(nu >= 0.0 && kappa > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need nu >= 0 and kappa > 0, got {nu} and {kappa}"
        )));
    }
    let tau = horizon - t;
    if nu == 0.0 {
        return Ok(match eta {
            Penalty::Infinite => kappa / tau,
            Penalty::Finite(e) => e * kappa / (kappa + e * tau),
        });
    }
    let s = (nu * kappa).sqrt();
    let th = ((nu / kappa).sqrt() * tau).tanh();
    Ok(match eta {
        Penalty::Infinite => s / th,
        Penalty::Finite(e) => s * (s * th + e) / (s + e * th),
    })
}

#[derive(Debug, Clone)]
pub struct OdeSolution {
    /// `c(t_k)` for `k = 0..N`; the last entry is the terminal value.
    pub c: Vec<f64>,
    /// RK4 substeps per grid interval in the accepted refinement.
    pub substeps: usize,
    pub halvings: usize,
    /// Relative difference between the last two refinements.
    pub refinement_gap: f64,
}

const MAX_HALVINGS: usize = 24;

/// Integrates `c' = c^2/kappa - nu` backward from the terminal value with
/// classical RK4 on piecewise linear coefficients, halving the substep until
/// two successive refinements agree to `1e-9` relative at every grid point.
///
/// Tables hold values at grid points `t_0 ..`; a table of length `N` is held
/// constant over the last interval. For an infinite penalty the integration
/// starts at `T - dt` from the constant-coefficient blow-up with the local
/// coefficient values.
pub fn solve_ode_deterministic(
    nu: &[f64],
    kappa: &[f64],
    eta: Penalty,
    grid: &TimeGrid,
) -> Result<OdeSolution> {
    let n = grid.steps();
    for (name, tab) in [("nu", nu), ("kappa", kappa)] {
        if tab.len() != n && tab.len() != n + 1 {
            return Err(Error::InvalidInput(format!(
                "{name} table needs {n} or {} entries, got {}",
                n + 1,
                tab.len()
            )));
        }
    }
    if nu.iter().any(|v| !(v.is_finite() && *v >= 0.0))
        || kappa.iter().any(|v| !(v.is_finite() && *v > 0.0))
    {
        return Err(Error::InvalidInput(
            "coefficient tables out of range".into(),
        ));
    }
    let at = |tab: &[f64], k: usize| tab[k.min(tab.len() - 1)];
    let dt = grid.dt();
    let (start_level, start_value) = match eta {
        Penalty::Finite(e) => (n, e),
        Penalty::Infinite => {
            let v = closed_form_constant(
                at(nu, n - 1),
                at(kappa, n - 1),
                Penalty::Infinite,
                grid.time(n - 1),
                grid.horizon(),
            )?;
            (n - 1, v)
        }
    };
    let integrate = |sub: usize| -> Vec<f64> {
        let mut out = vec![0.0; n + 1];
        out[n] = eta.as_f64();
        out[start_level] = start_value;
        let h = dt / sub as f64;
        let mut c = start_value;
        for k in (0..start_level).rev() {
            // interval [t_k, t_{k+1}], integrated from the right end
            let (nu0, nu1) = (at(nu, k), at(nu, k + 1));
            let (ka0, ka1) = (at(kappa, k), at(kappa, k + 1));
            // s is the time to the right end of the interval
            let rhs = |s: f64, c: f64| {
                let w = 1.0 - s / dt;
                let nu_s = nu0 + (nu1 - nu0) * w;
                let ka_s = ka0 + (ka1 - ka0) * w;
                nu_s - c * c / ka_s
            };
            for j in 0..sub {
                let s = j as f64 * h;
                let k1 = rhs(s, c);
                let k2 = rhs(s + 0.5 * h, c + 0.5 * h * k1);
                let k3 = rhs(s + 0.5 * h, c + 0.5 * h * k2);
                let k4 = rhs(s + h, c + h * k3);
                c += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            out[k] = c;
        }
        out
    };
    let mut sub = 1;
    let mut prev = integrate(sub);
    for halvings in 1..=MAX_HALVINGS {
        sub *= 2;
        let next = integrate(sub);
        let gap = prev[..start_level]
            .iter()
            .zip(&next[..start_level])
            .map(|(a, b)| rel_diff(*a, *b))
            .fold(0.0, f64::max);
        if gap < 1e-9 {
            return Ok(OdeSolution {
                c: next,
                substeps: sub,
                halvings,
                refinement_gap: gap,
            });
        }
        prev = next;
    }
    Err(Error::NonConvergence(format!(
        "RK4 did not settle after {MAX_HALVINGS} halvings"
    )))
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundSide {
    /// Nodes whose relative margin is below `-1e-12`.
    pub violations: usize,
    /// Smallest relative margin; nonnegative when the bound holds.
    pub min_margin: f64,
    pub witness: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub lower: Vec<f64>,
    pub upper: Option<Vec<f64>>,
    pub lower_side: BoundSide,
    pub upper_side: Option<BoundSide>,
}

/// Relative tolerance for bound margins.
pub const BOUND_TOL: f64 = 1e-12;

fn side(margins: impl Iterator<Item = (NodeId, f64)>) -> BoundSide {
    let mut s = BoundSide {
        violations: 0,
        min_margin: f64::INFINITY,
        witness: None,
    };
    for (id, m) in margins {
        if m < s.min_margin {
            s.min_margin = m;
            s.witness = Some(id);
        }
        if m < -BOUND_TOL {
            s.violations += 1;
        }
    }
    s
}

/// Lower bound `E[1/(sum_{j>=k} dt/kappa_j + 1/c_N) | node]` at every node
/// and, when requested, the upper bound
/// `(T - t_k)^{-2} E[sum_{j>=k} (kappa_j + (T - t_j)^2 nu_j) dt | node]`.
pub fn check_bounds(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    upper: bool,
) -> Result<BoundReport> {
    let n = tree.steps();
    let grid = tree.grid();
    let dt = grid.dt();
    let len = tree.prefix_len(n - 1);
    let inv_terminal = |i: usize| {
        let cn = riccati.terminal[i];
        if cn == f64::INFINITY {
            0.0
        } else {
            1.0 / cn
        }
    };
    let mut lower = vec![0.0; len];
    if tree.is_recombining() {
        // the remaining sum must be deterministic for a node-wise expectation
        for k in 0..n {
            let v = coeffs.kappa.on_level(tree, k);
            if v.iter().any(|x| *x != v[0]) {
                return Err(Error::PathDependent {
                    quantity: "lower bound",
                    node: tree.level(k).start,
                });
            }
        }
        let mut rest = vec![0.0; n + 1];
        for k in (0..n).rev() {
            rest[k] = rest[k + 1] + dt / coeffs.kappa.values[tree.level(k).start];
        }
        let leaf = tree.level(n - 1);
        for k in 0..n {
            let mut g = vec![0.0; len];
            for (i, id) in leaf.clone().enumerate() {
                g[id] = 1.0 / (rest[k] + inv_terminal(i));
            }
            for j in (k..n - 1).rev() {
                for id in tree.level(j) {
                    g[id] = tree.children(id).iter().map(|e| e.prob * g[e.child]).sum();
                }
            }
            for id in tree.level(k) {
                lower[id] = g[id];
            }
        }
    } else {
        let mut acc = vec![0.0; len];
        for (i, leaf) in tree.level(n - 1).enumerate() {
            let p_leaf = tree.node(leaf).probability;
            let mut rest = inv_terminal(i);
            let mut cur = Some(leaf);
            while let Some(id) = cur {
                rest += dt / coeffs.kappa.values[id];
                acc[id] += p_leaf / rest;
                cur = tree.node(id).parent(tree);
            }
        }
        for id in 0..len {
            lower[id] = acc[id] / tree.node(id).probability;
        }
    }
    let lower_side = side((0..len).map(|id| {
        let c = riccati.c.values[id];
        (
            id,
            if c == lower[id] {
                0.0
            } else {
                (c - lower[id]) / c.abs().max(lower[id].abs())
            },
        )
    }));

    let (upper, upper_side) = if upper {
        let mut g = vec![0.0; len];
        for k in (0..n).rev() {
            let tau = grid.time_to_go(k);
            for id in tree.level(k) {
                let own = (coeffs.kappa.values[id] + tau * tau * coeffs.nu.values[id]) * dt;
                let rest: f64 = if k == n - 1 {
                    0.0
                } else {
                    tree.children(id).iter().map(|e| e.prob * g[e.child]).sum()
                };
                g[id] = own + rest;
            }
        }
        let ub: Vec<f64> = (0..len)
            .map(|id| {
                let tau = grid.time_to_go(tree.node(id).level);
                g[id] / (tau * tau)
            })
            .collect();
        let s = side((0..len).map(|id| {
            let c = riccati.c.values[id];
            (
                id,
                if c == ub[id] {
                    0.0
                } else {
                    (ub[id] - c) / c.abs().max(ub[id].abs())
                },
            )
        }));
        (Some(ub), Some(s))
    } else {
        (None, None)
    };
    Ok(BoundReport {
        lower,
        upper,
        lower_side,
        upper_side,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrabilityReport {
    /// No level-`N-1` node carries an infinite penalty.
    pub vacuous: bool,
    /// Probability of the constrained set.
    pub probability: f64,
    /// Largest path sum of `(dN)^2 / c_parent^2` over constrained paths, with
    /// `dN` the martingale increment of `c`.
    pub max: f64,
    /// Conditional mean of the path sum given the constrained set.
    pub mean: f64,
}

/// Path sums of squared relative martingale increments of `c`, restricted to
/// paths that end in an infinite penalty.
pub fn check_integrability_condition(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
) -> IntegrabilityReport {
    let n = tree.steps();
    let last = n - 1;
    let len = tree.prefix_len(last);
    let mut h = vec![0.0; len];
    for (i, id) in tree.level(last).enumerate() {
        h[id] = if coeffs.eta[i].is_infinite() {
            1.0
        } else {
            0.0
        };
    }
    for k in (0..last).rev() {
        for id in tree.level(k) {
            h[id] = tree.children(id).iter().map(|e| e.prob * h[e.child]).sum();
        }
    }
    let probability = h[0];
    if probability == 0.0 {
        return IntegrabilityReport {
            vacuous: true,
            probability,
            max: 0.0,
            mean: 0.0,
        };
    }
    // only the martingale part carries quadratic variation in the limit
    let weight = |e: &crate::lattice::Edge| {
        let cp = riccati.c.values[e.parent];
        let d = riccati.martingale_increments[e.id];
        d * d / (cp * cp)
    };
    let mut best = vec![f64::NEG_INFINITY; len];
    best[0] = 0.0;
    let mut mean = 0.0;
    for k in 0..last {
        for id in tree.level(k) {
            let pp = tree.node(id).probability;
            for e in tree.children(id) {
                let w = weight(e);
                mean += pp * e.prob * w * h[e.child];
                if h[e.child] > 0.0 {
                    best[e.child] = best[e.child].max(best[id] + w);
                }
            }
        }
    }
    let max = tree
        .level(last)
        .enumerate()
        .filter(|(i, _)| coeffs.eta[*i].is_infinite())
        .map(|(_, id)| best[id])
        .fold(0.0, f64::max);
    IntegrabilityReport {
        vacuous: false,
        probability,
        max,
        mean: mean / probability,
    }
}
