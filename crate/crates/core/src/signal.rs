//! The optimal signal `xi_hat`, the weight process and their companions.
//!
//! Everything that is a node function is computed in relative form, divided
//! by the discount `D_k`, so it also works on recombining lattices:
//!
//! ```text
//! ell_k  = E[L_T | k] / D_k              = rho_k E[ell_{k+1}]
//! K_k    = E[sum_{r>=k} D_{r+1} nu_r dt | k] / D_k
//! KX_k   = same with xi_r inside the sum
//! xi_hat = (E[L_T xi_t | k] / D_k + KX_k) / c_k,     w = ell / c.
//! ```
//!
//! The recursion for `c` makes `c = ell + K` an identity, so the kernel
//! residual of the discrete kernel sits at rounding level. The path
//! quantities `B = xi_hat L`, `Y` and `M~ = B + Y` need the absolute
//! discount and are only available where it is a node function.

use serde::Serialize;

use crate::coefficients::{CoefficientSet, Penalty};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, NodeId, ScenarioTree};
use crate::riccati::{LProcess, RiccatiSolution};

#[derive(Debug, Clone)]
pub struct PathParts {
    /// `B_k = xi_hat_k L_k` on levels `0..N-1`.
    pub b_big: Vec<f64>,
    /// `Y_k = sum_{r<k} xi_r D_{r+1} nu_r dt` on levels `0..N`.
    pub y: Vec<f64>,
    /// `M~_k = B_k + Y_k` on levels `0..N-1`.
    pub m_tilde: Vec<f64>,
    /// Terminal martingale value `xi_t L_T + Y_N` per level-`N-1` node.
    pub m_terminal: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SignalProcess {
    pub xi_hat: AdaptedProcess,
    /// `b = c xi_hat`.
    pub b: AdaptedProcess,
    /// `E[L_T | k] / D_k`.
    pub ell: Vec<f64>,
    /// `E[L_T xi_t | k] / D_k`.
    pub ell_target: Vec<f64>,
    /// Discrete kernel mass `K_k`.
    pub kernel: Vec<f64>,
    /// Kernel mass weighted by the running target.
    pub kernel_target: Vec<f64>,
    /// `B`, `Y`, `M~`, or the reason they are unavailable.
    pub path: std::result::Result<PathParts, String>,
}

impl SignalProcess {
    pub fn root(&self) -> f64 {
        self.xi_hat.values[0]
    }

    /// Where the weight is exactly one: no risk weight left.
    pub fn kernel_vanishes(&self, id: NodeId) -> bool {
        self.kernel[id] == 0.0
    }

    /// Largest `|E[dM~ | node]|` relative to the node's scale.
    pub fn martingale_defect(&self, tree: &ScenarioTree) -> Option<f64> {
        let p = self.path.as_ref().ok()?;
        let n = tree.steps();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            for id in tree.level(k) {
                let next = if k == n - 1 {
                    p.m_terminal[tree.index_in_level(id)]
                } else {
                    tree.children(id)
                        .iter()
                        .map(|e| e.prob * p.m_tilde[e.child])
                        .sum()
                };
                let scale = p.m_tilde[id].abs().max(p.y[id].abs()).max(1e-300);
                worst = worst.max((next - p.m_tilde[id]).abs() / scale);
            }
        }
        Some(worst)
    }
}

pub fn compute_signal(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    l: Option<&LProcess>,
) -> Result<SignalProcess> {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let len = tree.prefix_len(n - 1);
    let mut ell = vec![0.0; len];
    let mut ell_target = vec![0.0; len];
    let mut kernel = vec![0.0; len];
    let mut kernel_target = vec![0.0; len];
    let mut xi_hat = vec![0.0; len];
    for k in (0..n).rev() {
        for id in tree.level(k) {
            let rho = riccati.retention[id];
            let nu_dt = coeffs.nu.values[id] * dt;
            let xi = coeffs.xi.values[id];
            if k == n - 1 {
                let i = tree.index_in_level(id);
                let cn = riccati.terminal[i];
                let lt = if cn == f64::INFINITY {
                    coeffs.kappa.values[id] / dt
                } else {
                    rho * cn
                };
                ell[id] = lt;
                ell_target[id] = lt * coeffs.xi_t[i];
                kernel[id] = rho * nu_dt;
                kernel_target[id] = rho * nu_dt * xi;
            } else {
                let mut s = [0.0; 4];
                for e in tree.children(id) {
                    s[0] += e.prob * ell[e.child];
                    s[1] += e.prob * ell_target[e.child];
                    s[2] += e.prob * kernel[e.child];
                    s[3] += e.prob * kernel_target[e.child];
                }
                ell[id] = rho * s[0];
                ell_target[id] = rho * s[1];
                kernel[id] = rho * (nu_dt + s[2]);
                kernel_target[id] = rho * (nu_dt * xi + s[3]);
            }
            let c = riccati.c.values[id];
            if !(c > 0.0) {
                return Err(Error::Consistency(format!(
                    "weight vanishes at node {id}; the signal is undefined"
                )));
            }
            xi_hat[id] = (ell_target[id] + kernel_target[id]) / c;
        }
    }
    let b: Vec<f64> = (0..len)
        .map(|id| riccati.c.values[id] * xi_hat[id])
        .collect();
    let path = match l {
        None => Err("discount process unavailable".to_string()),
        Some(l) => path_parts(tree, coeffs, l, &xi_hat).map_err(|e| e.to_string()),
    };
    Ok(SignalProcess {
        xi_hat: AdaptedProcess::new(tree, n - 1, xi_hat)?,
        b: AdaptedProcess::new(tree, n - 1, b)?,
        ell,
        ell_target,
        kernel,
        kernel_target,
        path,
    })
}

fn path_parts(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    l: &LProcess,
    xi_hat: &[f64],
) -> Result<PathParts> {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let len = tree.prefix_len(n - 1);
    let y = tree.forward(n, 0.0, "discounted running target", |e, acc| {
        let p = e.parent;
        acc + coeffs.xi.values[p] * l.discount[e.child] * coeffs.nu.values[p] * dt
    })?;
    let b_big: Vec<f64> = (0..len).map(|id| xi_hat[id] * l.l.values[id]).collect();
    let m_tilde: Vec<f64> = (0..len).map(|id| b_big[id] + y[id]).collect();
    let m_terminal = tree
        .level(n - 1)
        .enumerate()
        .map(|(i, id)| {
            // Y_N is known at level N-1: every child carries the same value
            let y_n = tree.children(id)[0].child;
            coeffs.xi_t[i] * l.l_terminal[i] + y[y_n]
        })
        .collect();
    Ok(PathParts {
        b_big,
        y,
        m_tilde,
        m_terminal,
    })
}

#[derive(Debug, Clone)]
pub struct WeightReport {
    pub w: AdaptedProcess,
    /// `|K / ((1 - w) c) - 1|` per node; `NaN` where the kernel is vacuous.
    pub kernel_residual: Vec<f64>,
    pub max_kernel_residual: f64,
    /// Same residual with the left-endpoint exponential kernel
    /// `E[sum_r exp(-sum_{k<=j<r} c_j dt/kappa_j) nu_r dt]`.
    pub exp_kernel_residual: Vec<f64>,
    pub max_exp_kernel_residual: f64,
    /// `max |w - (1 - K/c)|`.
    pub representation_gap: f64,
    /// Nodes with remaining risk weight where `w >= 1` or `w < 0`.
    pub out_of_range: Vec<NodeId>,
}

pub fn compute_weight(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
) -> Result<WeightReport> {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let len = tree.prefix_len(n - 1);
    let mut w = vec![0.0; len];
    let mut res = vec![f64::NAN; len];
    let mut exp_res = vec![f64::NAN; len];
    let mut exp_kernel = vec![0.0; len];
    let mut gap: f64 = 0.0;
    let mut out_of_range = Vec::new();
    for k in (0..n).rev() {
        for id in tree.level(k) {
            let nu_dt = coeffs.nu.values[id] * dt;
            let rest: f64 = if k == n - 1 {
                0.0
            } else {
                tree.children(id)
                    .iter()
                    .map(|e| e.prob * exp_kernel[e.child])
                    .sum()
            };
            let c = riccati.c.values[id];
            let decay = (-c / coeffs.kappa.values[id] * dt).exp();
            exp_kernel[id] = nu_dt + decay * rest;
            w[id] = signal.ell[id] / c;
            gap = gap.max((w[id] - (1.0 - signal.kernel[id] / c)).abs());
            if signal.kernel[id] > 0.0 {
                let denom = c - signal.ell[id];
                res[id] = (signal.kernel[id] / denom - 1.0).abs();
                exp_res[id] = (exp_kernel[id] / denom - 1.0).abs();
                if !(w[id] >= 0.0 && w[id] < 1.0) {
                    out_of_range.push(id);
                }
            }
        }
    }
    let max_of = |v: &[f64]| {
        v.iter()
            .filter(|x| !x.is_nan())
            .fold(0.0_f64, |a, &b| a.max(b))
    };
    Ok(WeightReport {
        max_kernel_residual: max_of(&res),
        max_exp_kernel_residual: max_of(&exp_res),
        w: AdaptedProcess::new(tree, n - 1, w)?,
        kernel_residual: res,
        exp_kernel_residual: exp_res,
        representation_gap: gap,
        out_of_range,
    })
}

impl WeightReport {
    /// Fails when the weight leaves `[0, 1)` where risk weight remains.
    pub fn ensure_in_range(&self) -> Result<()> {
        match self.out_of_range.first() {
            None => Ok(()),
            Some(&id) => Err(Error::Consistency(format!(
                "weight {} outside [0, 1) at node {id}",
                self.w.values[id]
            ))),
        }
    }
}

/// Largest deviation of `xi_hat` from `w Q[xi_t] + (1 - w) (kernel average)`,
/// relative to `max(1, |xi_hat|)`. `None` when `E[L_T] = 0`.
pub fn convex_combination_residual(
    tree: &ScenarioTree,
    signal: &SignalProcess,
    weight: &WeightReport,
) -> Option<f64> {
    if !(signal.ell[0] > 0.0) {
        return None;
    }
    let len = signal.xi_hat.values.len();
    let mut worst: f64 = 0.0;
    for id in 0..len {
        let w = weight.w.values[id];
        let q = if signal.ell[id] > 0.0 {
            signal.ell_target[id] / signal.ell[id]
        } else {
            0.0
        };
        let avg = if signal.kernel[id] > 0.0 {
            signal.kernel_target[id] / signal.kernel[id]
        } else {
            0.0
        };
        let rebuilt = w * q + (1.0 - w) * avg;
        let xh = signal.xi_hat.values[id];
        worst = worst.max((rebuilt - xh).abs() / xh.abs().max(1.0));
    }
    let _ = tree;
    Some(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct BResidual {
    /// `max |E[b_{k+1}] - b_k - (c_k b_k / kappa_k - nu_k xi_k) dt|` over
    /// levels `0..N-2`.
    pub max_drift_residual: f64,
    /// Same divided by `dt^2`.
    pub scaled: f64,
    /// `max |b_{N-1} - c_N xi_t|` over level-`N-1` nodes with finite weight.
    pub terminal_gap: f64,
}

pub fn compute_b(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: &RiccatiSolution,
    signal: &SignalProcess,
) -> BResidual {
    let n = tree.steps();
    let dt = tree.grid().dt();
    let b = &signal.b.values;
    let mut worst: f64 = 0.0;
    for k in 0..n.saturating_sub(1) {
        for id in tree.level(k) {
            let next: f64 = tree.children(id).iter().map(|e| e.prob * b[e.child]).sum();
            let c = riccati.c.values[id];
            let drift = (c / coeffs.kappa.values[id] * b[id]
                - coeffs.nu.values[id] * coeffs.xi.values[id])
                * dt;
            worst = worst.max((next - b[id] - drift).abs());
        }
    }
    let terminal_gap = tree
        .level(n - 1)
        .enumerate()
        .filter(|(i, _)| riccati.terminal[*i].is_finite())
        .map(|(i, id)| (b[id] - riccati.terminal[i] * coeffs.xi_t[i]).abs())
        .fold(0.0, f64::max);
    BResidual {
        max_drift_residual: worst,
        scaled: worst / (dt * dt),
        terminal_gap,
    }
}

/// Continuum kernel mass `int_t^T exp(-int_t^r c/kappa) nu dr` for constant
/// coefficients, as a function of the time to go `tau`.
///
/// Writing `c = kappa g'/g` with `g(s) = cosh(beta s) + (eta/q) sinh(beta s)`,
/// `beta = sqrt(nu/kappa)` and `q = sqrt(nu kappa)` turns the discount into
/// `g(T - r) / g(tau)`, and the integral is elementary.
pub fn kernel_closed_form(nu: f64, kappa: f64, eta: Penalty, tau: f64) -> f64 {
    if nu == 0.0 || tau <= 0.0 {
        return 0.0;
    }
    let q = (nu * kappa).sqrt();
    let x = (nu / kappa).sqrt() * tau;
    match eta {
        Penalty::Infinite => q * (0.5 * x).tanh(),
        Penalty::Finite(e) => {
            let r = e / q;
            let th = x.tanh();
            let sech = 1.0 / x.cosh();
            q * (th + r * (1.0 - sech)) / (1.0 + r * th)
        }
    }
}

/// Largest `|K_k - kernel_closed_form(T - t_k)|` over all nodes.
pub fn kernel_continuum_gap(
    tree: &ScenarioTree,
    signal: &SignalProcess,
    nu: f64,
    kappa: f64,
    eta: Penalty,
) -> f64 {
    let grid = tree.grid();
    (0..tree.steps())
        .flat_map(|k| tree.level(k).map(move |id| (k, id)))
        .map(|(k, id)| {
            (signal.kernel[id] - kernel_closed_form(nu, kappa, eta, grid.time_to_go(k))).abs()
        })
        .fold(0.0, f64::max)
}

/// `sum_{k<N-1} E[(xi_t - E[xi_t | k])^2] / (T - t_k)^2 dt`.
///
/// The conditional variances are accumulated from squared increments of the
/// conditional-mean martingale, so every term is nonnegative by construction.
pub fn predictability_functional(tree: &ScenarioTree, xi_t: &[f64]) -> Result<f64> {
    let n = tree.steps();
    let last = n - 1;
    if xi_t.len() != tree.level(last).len() {
        return Err(Error::InvalidInput(format!(
            "terminal target needs {} values",
            tree.level(last).len()
        )));
    }
    let len = tree.prefix_len(last);
    let mut g = vec![0.0; len];
    // v = E[(xi_t - g_k)^2 | node]
    let mut v = vec![0.0; len];
    for (i, id) in tree.level(last).enumerate() {
        g[id] = xi_t[i];
    }
    for k in (0..last).rev() {
        for id in tree.level(k) {
            let mut mean = 0.0;
            for e in tree.children(id) {
                mean += e.prob * g[e.child];
            }
            let mut var = 0.0;
            for e in tree.children(id) {
                let d = g[e.child] - mean;
                var += e.prob * (d * d + v[e.child]);
            }
            g[id] = mean;
            v[id] = var;
        }
    }
    let grid = tree.grid();
    let dt = grid.dt();
    let mut total = 0.0;
    for k in 0..last {
        let tau = grid.time_to_go(k);
        total += tree.expect_level(k, |id| v[id]) / (tau * tau) * dt;
    }
    Ok(total)
}
