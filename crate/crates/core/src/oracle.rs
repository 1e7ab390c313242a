//! Exact dynamic programming on the tree, written independently of the
//! Riccati recursion so the two can witness each other.
//!
//! Every node carries a quadratic value `V(x) = alpha x^2 - 2 beta x + gamma`
//! for the cost-to-go from the node with current state `x`. The minimization
//! is done over the post-control state `y = x + u dt`, which keeps the local
//! problem a plain quadratic in one variable. Constrained nodes force
//! `y = xi_t`.

use serde::Serialize;

use crate::coefficients::{CoefficientSet, Penalty};
use crate::controller::TrajectoryBundle;
use crate::error::{Error, Result};
use crate::lattice::{NodeId, ScenarioTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Every penalty replaced by `eta ^ n`.
    Truncated(f64),
    /// Finite penalties as given, infinite ones enforced as a hard constraint.
    Constrained,
}

#[derive(Debug, Clone)]
pub struct QuadraticValue {
    pub mode: OracleMode,
    /// Per node on levels `0..N-1`.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Optimal control `u = gain_const + gain_slope * x`.
    pub gain_const: Vec<f64>,
    pub gain_slope: Vec<f64>,
    /// Per level-`N-1` node: last step forced onto the target.
    pub constrained: Vec<bool>,
}

impl QuadraticValue {
    pub fn value(&self, id: NodeId, x: f64) -> f64 {
        self.alpha[id] * x * x - 2.0 * self.beta[id] * x + self.gamma[id]
    }

    pub fn control(&self, id: NodeId, x: f64) -> f64 {
        self.gain_const[id] + self.gain_slope[id] * x
    }

    /// `beta / alpha`, the state the value is centred on.
    pub fn centre(&self, id: NodeId) -> f64 {
        self.beta[id] / self.alpha[id]
    }

    /// Smallest `gamma alpha - beta^2`, relative to `max(gamma alpha, beta^2)`.
    pub fn min_discriminant(&self) -> f64 {
        self.alpha
            .iter()
            .zip(&self.beta)
            .zip(&self.gamma)
            .map(|((a, b), g)| {
                let lhs = g * a;
                let rhs = b * b;
                let scale = lhs.abs().max(rhs).max(f64::MIN_POSITIVE);
                (lhs - rhs) / scale
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Backward sweep of exact one-step quadratic minimizations.
pub fn dp_solve(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    mode: OracleMode,
) -> Result<QuadraticValue> {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let len = tree.prefix_len(n - 1);
    if coeffs.kappa.values.len() != len {
        return Err(Error::InvalidInput(
            "coefficients belong to another tree".into(),
        ));
    }
    if let OracleMode::Truncated(level) = mode {
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "truncation must be finite, got {level}"
            )));
        }
    }
    let mut alpha = vec![0.0; len];
    let mut beta = vec![0.0; len];
    let mut gamma = vec![0.0; len];
    let mut g0 = vec![0.0; len];
    let mut g1 = vec![0.0; len];
    let mut constrained = vec![false; tree.level(n - 1).len()];

    for k in (0..n).rev() {
        for id in tree.level(k) {
            let nu_dt = coeffs.nu.values[id] * dt;
            let ka = coeffs.kappa.values[id] / dt;
            let xi = coeffs.xi.values[id];
            // expected next-stage quadratic in y: p2 y^2 - 2 p1 y + p0
            let (p2, p1, p0) = if k == n - 1 {
                let i = tree.index_in_level(id);
                let target = coeffs.xi_t[i];
                let eta = match (mode, coeffs.eta[i]) {
                    (OracleMode::Constrained, Penalty::Infinite) => None,
                    (OracleMode::Constrained, Penalty::Finite(v)) => Some(v),
                    (OracleMode::Truncated(level), e) => Some(e.truncated(level)),
                };
                match eta {
                    Some(e) => (e, e * target, e * target * target),
                    None => {
                        constrained[i] = true;
                        // y = target: the value is the forced step cost
                        alpha[id] = ka;
                        beta[id] = ka * target;
                        gamma[id] = nu_dt * (target - xi) * (target - xi) + ka * target * target;
                        g0[id] = target / dt;
                        g1[id] = -1.0 / dt;
                        continue;
                    }
                }
            } else {
                let mut s = (0.0, 0.0, 0.0);
                for e in tree.children(id) {
                    s.0 += e.prob * alpha[e.child];
                    s.1 += e.prob * beta[e.child];
                    s.2 += e.prob * gamma[e.child];
                }
                s
            };
            // minimize nu_dt (y - xi)^2 + ka (y - x)^2 + p2 y^2 - 2 p1 y + p0
            let a2 = p2 + nu_dt + ka;
            if !(a2 > 0.0) || !a2.is_finite() {
                return Err(Error::Consistency(format!(
                    "curvature {a2} is not positive at node {id}"
                )));
            }
            let lin = p1 + nu_dt * xi;
            alpha[id] = ka * (p2 + nu_dt) / a2;
            beta[id] = ka * lin / a2;
            gamma[id] = p0 + nu_dt * xi * xi - lin * lin / a2;
            // y* = (lin + ka x) / a2, u = (y* - x)/dt
            g0[id] = lin / (a2 * dt);
            g1[id] = -(p2 + nu_dt) / (a2 * dt);
        }
    }
    Ok(QuadraticValue {
        mode,
        alpha,
        beta,
        gamma,
        gain_const: g0,
        gain_slope: g1,
        constrained,
    })
}

#[derive(Debug, Clone)]
pub struct GridValueTable {
    pub x_grid: Vec<f64>,
    /// Per node on levels `0..N-1`, one value per grid state.
    pub values: Vec<Vec<f64>>,
    /// Minimizing control per node and grid state.
    pub argmin: Vec<Vec<f64>>,
    /// Minimizers that landed on the edge of the control grid.
    pub unbracketed: usize,
    /// Constrained nodes where no grid control hit the target.
    pub infeasible: usize,
}

/// Tolerance for hitting a constrained target with a grid control.
const GRID_CONSTRAINT_TOL: f64 = 1e-9;

/// Brute-force backward induction over a state grid and a control grid with
/// linear interpolation in the state. Only meant for tiny binary trees.
pub fn dp_grid_search(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    mode: OracleMode,
    x_grid: &[f64],
    u_grid: &[f64],
) -> Result<GridValueTable> {
    let n = tree.steps();
    if n > 4 || tree.branching() != 2 || tree.is_recombining() {
        return Err(Error::InvalidInput(
            "grid search is limited to binary trees with at most 4 steps".into(),
        ));
    }
    if x_grid.len() < 2 || u_grid.len() < 3 || x_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(
            "grids must be increasing with enough points".into(),
        ));
    }
    let dt = tree.grid().dt();
    let len = tree.prefix_len(n - 1);
    let mut values = vec![Vec::new(); len];
    let mut argmin = vec![Vec::new(); len];
    let mut unbracketed = 0;
    let mut infeasible = 0;
    for k in (0..n).rev() {
        for id in tree.level(k) {
            let nu = coeffs.nu.values[id];
            let kappa = coeffs.kappa.values[id];
            let xi = coeffs.xi.values[id];
            let mut row = Vec::with_capacity(x_grid.len());
            let mut arg = Vec::with_capacity(x_grid.len());
            for &x in x_grid {
                let mut best = f64::INFINITY;
                let mut best_j = usize::MAX;
                for (j, &u) in u_grid.iter().enumerate() {
                    let y = x + u * dt;
                    let run = (y - xi).powi(2) * nu * dt + kappa * u * u * dt;
                    let future = if k == n - 1 {
                        let i = tree.index_in_level(id);
                        let target = coeffs.xi_t[i];
                        let eta = match (mode, coeffs.eta[i]) {
                            (OracleMode::Constrained, Penalty::Infinite) => None,
                            (OracleMode::Constrained, Penalty::Finite(v)) => Some(v),
                            (OracleMode::Truncated(level), e) => Some(e.truncated(level)),
                        };
                        match eta {
                            Some(e) => e * (y - target).powi(2),
                            None if (y - target).abs()
                                <= GRID_CONSTRAINT_TOL * target.abs().max(1.0) =>
                            {
                                0.0
                            }
                            None => f64::INFINITY,
                        }
                    } else {
                        tree.children(id)
                            .iter()
                            .map(|e| e.prob * interpolate(x_grid, &values[e.child], y))
                            .sum()
                    };
                    let total = run + future;
                    if total < best {
                        best = total;
                        best_j = j;
                    }
                }
                if best_j == usize::MAX {
                    infeasible += 1;
                    row.push(f64::INFINITY);
                    arg.push(f64::NAN);
                    continue;
                }
                let constrained_leaf = k == n - 1
                    && matches!(mode, OracleMode::Constrained)
                    && coeffs.eta[tree.index_in_level(id)].is_infinite();
                if !constrained_leaf && (best_j == 0 || best_j == u_grid.len() - 1) {
                    unbracketed += 1;
                }
                row.push(best);
                arg.push(u_grid[best_j]);
            }
            values[id] = row;
            argmin[id] = arg;
        }
    }
    Ok(GridValueTable {
        x_grid: x_grid.to_vec(),
        values,
        argmin,
        unbracketed,
        infeasible,
    })
}

/// Piecewise linear interpolation, extended linearly past the grid ends.
fn interpolate(xs: &[f64], vs: &[f64], x: f64) -> f64 {
    let last = xs.len() - 1;
    let i = match xs.partition_point(|&g| g <= x) {
        0 => 0,
        p if p > last => last - 1,
        p => p - 1,
    };
    let (x0, x1) = (xs[i], xs[i + 1]);
    let w = (x - x0) / (x1 - x0);
    vs[i] + w * (vs[i + 1] - vs[i])
}

impl GridValueTable {
    /// Largest `|V_grid - V_exact|` over the given levels and grid states
    /// whose absolute value lies inside `window`.
    pub fn max_error(
        &self,
        tree: &ScenarioTree,
        exact: &QuadraticValue,
        levels: std::ops::Range<usize>,
        window: f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for k in levels {
            for id in tree.level(k) {
                for (i, &x) in self.x_grid.iter().enumerate() {
                    if x.abs() <= window {
                        worst = worst.max((self.values[id][i] - exact.value(id, x)).abs());
                    }
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyComparison {
    pub max_control_gap: f64,
    pub max_state_gap: f64,
    /// Node attaining the largest control gap.
    pub witness: Option<NodeId>,
}

/// Sup-norm distance between two trajectory bundles on the same tree.
pub fn compare_policies(a: &TrajectoryBundle, b: &TrajectoryBundle) -> Result<PolicyComparison> {
    if a.fingerprint != b.fingerprint || a.x.len() != b.x.len() || a.u.len() != b.u.len() {
        return Err(Error::InvalidInput(
            "trajectory bundles live on different trees".into(),
        ));
    }
    let mut out = PolicyComparison {
        max_control_gap: 0.0,
        max_state_gap: 0.0,
        witness: None,
    };
    for (id, (ua, ub)) in a.u.iter().zip(&b.u).enumerate() {
        let d = (ua - ub).abs();
        if d > out.max_control_gap || out.witness.is_none() {
            out.max_control_gap = out.max_control_gap.max(d);
            out.witness = Some(id);
        }
    }
    out.max_state_gap =
        a.x.iter()
            .zip(&b.x)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
    Ok(out)
}
