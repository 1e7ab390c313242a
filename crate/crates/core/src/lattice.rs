//! Finite scenario trees standing in for the filtration.
//!
//! A [`ScenarioTree`] is a layered graph: level `k` holds the nodes known at
//! time `t_k`, and every non-terminal node carries a list of outgoing edges
//! with strictly positive transition probabilities summing to one. Each edge
//! carries a noise increment with zero conditional mean and conditional
//! variance `dt`.
//!
//! Three layouts are supported:
//!
//! * [`LatticeKind::Tree`]: non-recombining, one parent per node. Every
//!   path functional is a node function.
//! * [`LatticeKind::RecombiningWalk`]: binary walk whose node remembers only
//!   the number of down moves. Only Markovian data fits on it, and forward
//!   (path) quantities are accepted only when all parents agree.
//! * [`LatticeKind::MemoryWalk`]: binary walk whose node also remembers the
//!   sign of the first and of the last increment.
//!
//! Conditional expectations are exact finite sums over children, always in
//! edge order, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type EdgeId = usize;

/// Default cap on the number of nodes a tree may allocate.
pub const DEFAULT_NODE_BUDGET: usize = 1 << 22;

/// Relative tolerance used when parents of a recombining node must agree.
const PATH_AGREEMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be finite and positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        times[steps] = horizon;
        Ok(Self {
            horizon,
            steps,
            dt,
            times,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// `T - t_k`, computed as `(N - k) dt` so that it is exact on the grid.
    pub fn time_to_go(&self, k: usize) -> f64 {
        (self.steps - k) as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeKind {
    Tree,
    RecombiningWalk,
    MemoryWalk,
}

#[derive(Debug, Clone, Serialize)]
pub struct Edge {
    pub id: EdgeId,
    pub parent: NodeId,
    pub child: NodeId,
    pub prob: f64,
    pub increment: f64,
}

/// Path summary carried by every node. On trees these are exact path
/// functionals; on walks they are the state that the layout remembers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PathState {
    /// Sum of increments from the root.
    pub walk: f64,
    pub ups: u32,
    pub downs: u32,
    /// Sign of the first increment on the path (0 at the root, or when the
    /// layout does not remember it).
    pub first_sign: i8,
    /// Sign of the increment that led into this node (0 at the root, or when
    /// the layout does not remember it).
    pub last_sign: i8,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub level: usize,
    /// Unconditional probability of reaching the node.
    pub probability: f64,
    pub state: PathState,
    edges: Range<EdgeId>,
    in_edges: Vec<EdgeId>,
}

impl Node {
    /// Unique parent on trees; `None` at the root and on nodes with several
    /// parents.
    pub fn parent(&self, tree: &ScenarioTree) -> Option<NodeId> {
        match self.in_edges.as_slice() {
            [e] => Some(tree.edges[*e].parent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    grid: TimeGrid,
    kind: LatticeKind,
    branching: usize,
    seed: u64,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    level_start: Vec<usize>,
}

#[derive(Serialize)]
struct NodeDump {
    id: NodeId,
    level: usize,
    parent: Option<NodeId>,
    probability: f64,
    increment: Option<f64>,
}

impl ScenarioTree {
    /// Non-recombining tree with `branching` children per node and the
    /// default node budget.
    pub fn build(grid: TimeGrid, branching: usize, seed: u64) -> Result<Self> {
        Self::build_with_budget(grid, branching, seed, DEFAULT_NODE_BUDGET)
    }

    pub fn build_with_budget(
        grid: TimeGrid,
        branching: usize,
        seed: u64,
        budget: usize,
    ) -> Result<Self> {
        if branching < 2 {
            return Err(Error::InvalidTree(format!(
                "branching must be at least 2, got {branching}"
            )));
        }
        let n = grid.steps();
        // a priori guard before any arithmetic can overflow
        if n as f64 * (branching as f64).log2() > (budget as f64).log2() + 1.0 {
            return Err(Error::NodeBudget {
                needed: format!("~{branching}^{n}"),
                budget,
            });
        }
        let mut total: usize = 0;
        let mut width: usize = 1;
        for _ in 0..=n {
            total = total.saturating_add(width);
            width = width.saturating_mul(branching);
        }
        if total > budget {
            return Err(Error::NodeBudget {
                needed: total.to_string(),
                budget,
            });
        }

        let sqrt_dt = grid.dt().sqrt();
        let prob = 1.0 / branching as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = Vec::with_capacity(total);
        let mut edges = Vec::with_capacity(total.saturating_sub(1));
        let mut level_start = vec![0];
        nodes.push(Node {
            id: 0,
            level: 0,
            probability: 1.0,
            state: PathState::default(),
            edges: 0..0,
            in_edges: Vec::new(),
        });
        level_start.push(1);
        for k in 0..n {
            let (lo, hi) = (level_start[k], level_start[k + 1]);
            for parent in lo..hi {
                let shocks = unit_shocks(branching, &mut rng);
                let first_edge = edges.len();
                for z in shocks {
                    let child = nodes.len();
                    let increment = z * sqrt_dt;
                    let ps = nodes[parent].state;
                    let sign = sign_of(increment);
                    let state = PathState {
                        walk: ps.walk + increment,
                        ups: ps.ups + u32::from(sign > 0),
                        downs: ps.downs + u32::from(sign < 0),
                        first_sign: if k == 0 { sign } else { ps.first_sign },
                        last_sign: sign,
                    };
                    edges.push(Edge {
                        id: edges.len(),
                        parent,
                        child,
                        prob,
                        increment,
                    });
                    nodes.push(Node {
                        id: child,
                        level: k + 1,
                        probability: nodes[parent].probability * prob,
                        state,
                        edges: 0..0,
                        in_edges: vec![edges.len() - 1],
                    });
                }
                nodes[parent].edges = first_edge..edges.len();
            }
            level_start.push(nodes.len());
        }
        Ok(Self {
            grid,
            kind: LatticeKind::Tree,
            branching,
            seed,
            nodes,
            edges,
            level_start,
        })
    }

    /// Recombining binary walk with increments `±sqrt(dt)`; level `k` has
    /// `k + 1` nodes.
    pub fn recombining_walk(grid: TimeGrid) -> Result<Self> {
        Self::walk(grid, false)
    }

    /// Binary walk that also remembers the first and the last increment sign.
    pub fn memory_walk(grid: TimeGrid) -> Result<Self> {
        Self::walk(grid, true)
    }

    fn walk(grid: TimeGrid, memory: bool) -> Result<Self> {
        type Key = (u32, i8, i8);
        let n = grid.steps();
        let sqrt_dt = grid.dt().sqrt();
        let mut nodes = vec![Node {
            id: 0,
            level: 0,
            probability: 1.0,
            state: PathState::default(),
            edges: 0..0,
            in_edges: Vec::new(),
        }];
        let mut edges: Vec<Edge> = Vec::new();
        let mut level_start = vec![0, 1];
        for k in 0..n {
            let (lo, hi) = (level_start[k], level_start[k + 1]);
            // children keyed by remembered state, ordered deterministically
            let mut next: BTreeMap<Key, PathState> = BTreeMap::new();
            let mut pending: Vec<(NodeId, Key, f64)> = Vec::new();
            for parent in lo..hi {
                let ps = nodes[parent].state;
                for z in [1.0_f64, -1.0] {
                    let sign = z as i8;
                    let state = PathState {
                        walk: ps.walk + z * sqrt_dt,
                        ups: ps.ups + u32::from(sign > 0),
                        downs: ps.downs + u32::from(sign < 0),
                        first_sign: if !memory {
                            0
                        } else if k == 0 {
                            sign
                        } else {
                            ps.first_sign
                        },
                        last_sign: if memory { sign } else { 0 },
                    };
                    let key = (state.downs, -state.first_sign, -state.last_sign);
                    next.entry(key).or_insert(state);
                    pending.push((parent, key, z * sqrt_dt));
                }
            }
            let base = nodes.len();
            let mut ids = BTreeMap::new();
            for (i, (key, state)) in next.into_iter().enumerate() {
                ids.insert(key, base + i);
                nodes.push(Node {
                    id: base + i,
                    level: k + 1,
                    probability: 0.0,
                    state,
                    edges: 0..0,
                    in_edges: Vec::new(),
                });
            }
            for chunk in pending.chunks(2) {
                let parent = chunk[0].0;
                let first_edge = edges.len();
                for &(_, key, increment) in chunk {
                    let child = ids[&key];
                    let eid = edges.len();
                    edges.push(Edge {
                        id: eid,
                        parent,
                        child,
                        prob: 0.5,
                        increment,
                    });
                    nodes[child].in_edges.push(eid);
                    let p = nodes[parent].probability * 0.5;
                    nodes[child].probability += p;
                }
                nodes[parent].edges = first_edge..edges.len();
            }
            level_start.push(nodes.len());
        }
        Ok(Self {
            grid,
            kind: if memory {
                LatticeKind::MemoryWalk
            } else {
                LatticeKind::RecombiningWalk
            },
            branching: 2,
            seed: 0,
            nodes,
            edges,
            level_start,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn is_recombining(&self) -> bool {
        self.kind != LatticeKind::Tree
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Outgoing edge ids of a node, in fixed order.
    pub fn edge_ids(&self, id: NodeId) -> Range<EdgeId> {
        self.nodes[id].edges.clone()
    }

    pub fn children(&self, id: NodeId) -> &[Edge] {
        &self.edges[self.nodes[id].edges.clone()]
    }

    pub fn in_edges(&self, id: NodeId) -> &[EdgeId] {
        &self.nodes[id].in_edges
    }

    pub fn level(&self, k: usize) -> Range<NodeId> {
        self.level_start[k]..self.level_start[k + 1]
    }

    /// Number of nodes in levels `0..=k`.
    pub fn prefix_len(&self, k: usize) -> usize {
        self.level_start[k + 1]
    }

    /// Edges leaving level `k`.
    pub fn level_edges(&self, k: usize) -> Range<EdgeId> {
        let r = self.level(k);
        self.nodes[r.start].edges.start..self.nodes[r.end - 1].edges.end
    }

    /// Position of a node inside its level.
    pub fn index_in_level(&self, id: NodeId) -> usize {
        id - self.level_start[self.nodes[id].level]
    }

    /// Cheap identity check used to reject mixing results of different trees.
    pub fn fingerprint(&self) -> (usize, usize, usize, u64) {
        (self.steps(), self.nodes.len(), self.edges.len(), self.seed)
    }

    /// Exact conditional expectation at every level-`k` node of a node
    /// function evaluated on the children.
    pub fn expect_children<F>(&self, k: usize, f: F) -> Vec<f64>
    where
        F: Fn(&Edge) -> f64,
    {
        self.level(k)
            .map(|id| self.children(id).iter().map(|e| e.prob * f(e)).sum())
            .collect()
    }

    /// Conditional expectation of a process given level `k`; the process must
    /// be defined on level `k + 1`.
    pub fn conditional_expectation(&self, proc: &AdaptedProcess, k: usize) -> Result<Vec<f64>> {
        if k >= self.steps() || proc.last_level < k + 1 {
            return Err(Error::MissingLevel {
                have: proc.last_level,
                need: k + 1,
            });
        }
        Ok(self.expect_children(k, |e| proc.values[e.child]))
    }

    /// Unconditional expectation of a process at level `k`.
    pub fn expectation(&self, proc: &AdaptedProcess, k: usize) -> Result<f64> {
        if proc.last_level < k {
            return Err(Error::MissingLevel {
                have: proc.last_level,
                need: k,
            });
        }
        Ok(self.expect_level(k, |id| proc.values[id]))
    }

    /// Unconditional expectation of a node function over level `k`.
    pub fn expect_level<F: Fn(NodeId) -> f64>(&self, k: usize, f: F) -> f64 {
        self.level(k)
            .map(|id| self.nodes[id].probability * f(id))
            .sum()
    }

    /// Splits every edge increment of `proc` into its conditional mean
    /// (predictable part, one value per parent) and a zero-mean remainder.
    pub fn doob_decompose(&self, proc: &AdaptedProcess) -> Result<DoobDecomposition> {
        let top = proc.last_level.min(self.steps());
        let mut predictable = vec![0.0; self.prefix_len(top)];
        let mut martingale = vec![0.0; self.edges.len()];
        for k in 0..top {
            for id in self.level(k) {
                let parent_value = proc.values[id];
                let drift: f64 = self
                    .children(id)
                    .iter()
                    .map(|e| e.prob * (proc.values[e.child] - parent_value))
                    .sum();
                predictable[id] = drift;
                for eid in self.edge_ids(id) {
                    let child = self.edges[eid].child;
                    martingale[eid] = proc.values[child] - parent_value - drift;
                }
            }
        }
        Ok(DoobDecomposition {
            last_level: top,
            predictable,
            martingale,
        })
    }

    /// Pathwise sum of squared increments.
    pub fn quadratic_variation(&self, proc: &AdaptedProcess) -> Result<AdaptedProcess> {
        self.covariation(proc, proc)
    }

    /// Pathwise sum of products of increments of two processes.
    pub fn covariation(&self, a: &AdaptedProcess, b: &AdaptedProcess) -> Result<AdaptedProcess> {
        let top = a.last_level.min(b.last_level);
        let values = self.forward(top, 0.0, "covariation", |e, acc| {
            let da = a.values[e.child] - a.values[e.parent];
            let db = b.values[e.child] - b.values[e.parent];
            acc + da * db
        })?;
        Ok(AdaptedProcess {
            last_level: top,
            values,
        })
    }

    /// Propagates a path functional forward from the root up to `last_level`.
    ///
    /// On recombining layouts every incoming edge must produce the same child
    /// value (relative tolerance `1e-12`); otherwise the quantity is not a
    /// node function and [`Error::PathDependent`] is returned.
    pub fn forward<F>(
        &self,
        last_level: usize,
        root: f64,
        quantity: &'static str,
        step: F,
    ) -> Result<Vec<f64>>
    where
        F: Fn(&Edge, f64) -> f64,
    {
        let top = last_level.min(self.steps());
        let mut values = vec![f64::NAN; self.prefix_len(top)];
        values[0] = root;
        for k in 1..=top {
            for id in self.level(k) {
                let mut acc: Option<f64> = None;
                for &eid in &self.nodes[id].in_edges {
                    let e = &self.edges[eid];
                    let v = step(e, values[e.parent]);
                    match acc {
                        None => acc = Some(v),
                        Some(prev) if agree(prev, v) => {}
                        Some(_) => return Err(Error::PathDependent { quantity, node: id }),
                    }
                }
                values[id] = acc.unwrap_or(f64::NAN);
            }
        }
        Ok(values)
    }

    /// Root-to-leaf paths as node-id sequences. Only meaningful on trees.
    pub fn paths(&self) -> Result<Vec<Vec<NodeId>>> {
        if self.is_recombining() {
            return Err(Error::PathDependent {
                quantity: "path enumeration",
                node: 0,
            });
        }
        let n = self.steps();
        Ok(self
            .level(n)
            .map(|leaf| {
                let mut path = vec![leaf];
                let mut cur = leaf;
                while let Some(p) = self.nodes[cur].parent(self) {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                path
            })
            .collect())
    }

    /// Debug dump: every node with its parent, probability and increment.
    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<NodeDump> = self
            .nodes
            .iter()
            .map(|n| NodeDump {
                id: n.id,
                level: n.level,
                parent: n.parent(self),
                probability: n.probability,
                increment: n.in_edges.first().map(|&e| self.edges[e].increment),
            })
            .collect();
        serde_json::json!({
            "kind": self.kind,
            "steps": self.steps(),
            "horizon": self.grid.horizon(),
            "branching": self.branching,
            "seed": self.seed,
            "nodes": nodes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DoobDecomposition {
    pub last_level: usize,
    /// Conditional mean increment, indexed by the parent node.
    pub predictable: Vec<f64>,
    /// Zero-mean remainder, indexed by edge.
    pub martingale: Vec<f64>,
}

/// One real value per node on levels `0..=last_level`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    pub last_level: usize,
    pub values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn new(tree: &ScenarioTree, last_level: usize, values: Vec<f64>) -> Result<Self> {
        let need = tree.prefix_len(last_level);
        if values.len() != need {
            return Err(Error::InvalidInput(format!(
                "process on levels 0..={last_level} needs {need} values, got {}",
                values.len()
            )));
        }
        Ok(Self { last_level, values })
    }

    pub fn constant(tree: &ScenarioTree, last_level: usize, value: f64) -> Self {
        Self {
            last_level,
            values: vec![value; tree.prefix_len(last_level)],
        }
    }

    pub fn from_fn<F: Fn(&Node) -> f64>(tree: &ScenarioTree, last_level: usize, f: F) -> Self {
        Self {
            last_level,
            values: tree.nodes[..tree.prefix_len(last_level)]
                .iter()
                .map(f)
                .collect(),
        }
    }

    pub fn get(&self, id: NodeId) -> f64 {
        self.values[id]
    }

    pub fn on_level<'a>(&'a self, tree: &ScenarioTree, k: usize) -> &'a [f64] {
        &self.values[tree.level(k)]
    }
}

pub(crate) fn agree(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= PATH_AGREEMENT_TOL * a.abs().max(b.abs())
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Equal-weight shock values with mean 0 and variance 1, sorted descending.
/// Binary nodes get exactly `+1, -1`; wider nodes draw a random shape from the
/// seeded stream and moment-match it.
fn unit_shocks(branching: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if branching == 2 {
        return vec![1.0, -1.0];
    }
    loop {
        let raw: Vec<f64> = (0..branching).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = branching as f64;
        let mean = raw.iter().sum::<f64>() / b;
        let var = raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / b;
        if var < 1e-6 {
            continue;
        }
        let sd = var.sqrt();
        let mut z: Vec<f64> = raw.iter().map(|r| (r - mean) / sd).collect();
        z.sort_by(|a, b| b.total_cmp(a));
        return z;
    }
}
