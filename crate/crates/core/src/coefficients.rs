//! Problem data: risk weight `nu`, control cost `kappa`, running target `xi`,
//! terminal target `xi_t`, terminal penalty `eta` and the initial state.
//!
//! `nu`, `kappa` and `xi` live on levels `0..N-1` and are used over the step
//! that starts at the node. `xi_t` and `eta` live on level `N-1`: they are
//! known one step before the horizon, which makes the constrained last step
//! well posed node by node. An infinite penalty is stored as
//! [`Penalty::Infinite`], never as a large float.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, LatticeKind, NodeId, ScenarioTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Nu,
    Kappa,
    Xi,
    XiT,
    Eta,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Nu => "nu",
            Slot::Kappa => "kappa",
            Slot::Xi => "xi",
            Slot::XiT => "xi_t",
            Slot::Eta => "eta",
        }
    }

    /// Terminal slots only carry data on level `N-1`.
    pub fn is_terminal(self) -> bool {
        matches!(self, Slot::XiT | Slot::Eta)
    }
}

/// Terminal penalty weight in `[0, +inf]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Penalty {
    Finite(f64),
    Infinite,
}

impl Penalty {
    pub fn is_infinite(self) -> bool {
        matches!(self, Penalty::Infinite)
    }

    /// `eta ^ n`; infinite penalties become `n`.
    pub fn truncated(self, n: f64) -> f64 {
        match self {
            Penalty::Finite(v) => v.min(n),
            Penalty::Infinite => n,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Penalty::Finite(v) => v,
            Penalty::Infinite => f64::INFINITY,
        }
    }
}

/// How a coefficient is laid out on the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Constant {
        #[serde(deserialize_with = "de_real")]
        value: f64,
    },
    /// One value per level `k = 0..N-1`.
    DeterministicFn {
        #[serde(deserialize_with = "de_reals")]
        values: Vec<f64>,
    },
    /// `initial * up^(#up moves) * down^(#down moves)` along the path.
    GeometricOnTree { initial: f64, up: f64, down: f64 },
    /// Explicit values indexed by node id (levels `0..N-1`), or, for the
    /// terminal slots, one value per level-`N-1` node.
    NodeTable {
        #[serde(deserialize_with = "de_reals")]
        values: Vec<f64>,
    },
    /// `initial + scale * W` with `W` the sum of increments so far.
    RandomWalk { initial: f64, scale: f64 },
    /// Depends on the sign of the first increment only.
    FirstBranch {
        #[serde(deserialize_with = "de_real")]
        up: f64,
        #[serde(deserialize_with = "de_real")]
        down: f64,
    },
    /// Depends on the sign of the increment leading into the node only.
    LastBranch {
        #[serde(deserialize_with = "de_real")]
        up: f64,
        #[serde(deserialize_with = "de_real")]
        down: f64,
    },
    /// Independent uniform draw per node from a seeded stream.
    Uniform { low: f64, high: f64, seed: u64 },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RealRepr {
    Num(f64),
    Int(i64),
    Text(String),
}

fn parse_real(r: RealRepr) -> std::result::Result<f64, String> {
    match r {
        RealRepr::Num(v) => Ok(v),
        RealRepr::Int(v) => Ok(v as f64),
        RealRepr::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
            other => other
                .parse::<f64>()
                .map_err(|_| format!("expected a number or \"inf\", got {s:?}")),
        },
    }
}

fn de_real<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    parse_real(RealRepr::deserialize(d)?).map_err(serde::de::Error::custom)
}

fn de_reals<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Vec::<RealRepr>::deserialize(d)?
        .into_iter()
        .map(|r| parse_real(r).map_err(serde::de::Error::custom))
        .collect()
}

impl ModelSpec {
    pub fn constant(value: f64) -> Self {
        ModelSpec::Constant { value }
    }

    /// True when the produced process can only vary with the level.
    pub fn is_level_deterministic(&self) -> bool {
        matches!(
            self,
            ModelSpec::Constant { .. } | ModelSpec::DeterministicFn { .. }
        )
    }
}

/// Raw node values for a slot on levels `0..N-1`, before sign checks.
fn raw_values(spec: &ModelSpec, tree: &ScenarioTree, slot: Slot) -> Result<Vec<f64>> {
    let last = tree.steps() - 1;
    let len = tree.prefix_len(last);
    let nodes = &tree.nodes()[..len];
    let bad = |reason: String| Error::ModelSpec {
        slot: slot.name(),
        reason,
    };
    let needs_signs = |what: &str| -> Result<()> {
        if tree.kind() == LatticeKind::RecombiningWalk {
            return Err(bad(format!(
                "{what} needs a layout that remembers branch signs"
            )));
        }
        Ok(())
    };
    Ok(match spec {
        ModelSpec::Constant { value } => vec![*value; len],
        ModelSpec::DeterministicFn { values } => {
            if values.len() < last + 1 {
                return Err(bad(format!(
                    "table has {} levels, {} are required",
                    values.len(),
                    last + 1
                )));
            }
            nodes.iter().map(|n| values[n.level]).collect()
        }
        ModelSpec::GeometricOnTree { initial, up, down } => nodes
            .iter()
            .map(|n| initial * up.powi(n.state.ups as i32) * down.powi(n.state.downs as i32))
            .collect(),
        ModelSpec::NodeTable { values } => {
            let width = tree.level(last).len();
            if values.len() == len {
                values[..len].to_vec()
            } else if slot.is_terminal() && values.len() == width {
                let mut out = vec![0.0; len];
                for (i, id) in tree.level(last).enumerate() {
                    out[id] = values[i];
                }
                out
            } else {
                return Err(bad(format!(
                    "node table has {} entries, expected {len}{}",
                    values.len(),
                    if slot.is_terminal() {
                        format!(" or {width}")
                    } else {
                        String::new()
                    }
                )));
            }
        }
        ModelSpec::RandomWalk { initial, scale } => nodes
            .iter()
            .map(|n| initial + scale * n.state.walk)
            .collect(),
        ModelSpec::FirstBranch { up, down } => {
            needs_signs("first_branch")?;
            nodes
                .iter()
                .map(|n| branch_value(n.state.first_sign, *up, *down))
                .collect()
        }
        ModelSpec::LastBranch { up, down } => {
            needs_signs("last_branch")?;
            nodes
                .iter()
                .map(|n| branch_value(n.state.last_sign, *up, *down))
                .collect()
        }
        ModelSpec::Uniform { low, high, seed } => {
            if !(low <= high) {
                return Err(bad(format!("empty range [{low}, {high}]")));
            }
            nodes
                .iter()
                .map(|n| {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    rng.set_stream(n.id as u64);
                    low + (high - low) * rng.gen::<f64>()
                })
                .collect()
        }
    })
}

fn branch_value(sign: i8, up: f64, down: f64) -> f64 {
    match sign {
        1 => up,
        -1 => down,
        // root: nothing revealed yet
        _ => 0.5 * (up + down),
    }
}

/// Produces the node process for `slot` on levels `0..N-1` and enforces the
/// slot's sign constraints.
pub fn materialize(spec: &ModelSpec, tree: &ScenarioTree, slot: Slot) -> Result<AdaptedProcess> {
    let values = raw_values(spec, tree, slot)?;
    let last = tree.steps() - 1;
    let lo = if slot.is_terminal() {
        tree.level(last).start
    } else {
        0
    };
    for (id, &v) in values.iter().enumerate().skip(lo) {
        let reason = match slot {
            _ if v.is_nan() => Some("value is NaN".to_string()),
            Slot::Eta if v < 0.0 => Some(format!("penalty must be nonnegative, got {v}")),
            Slot::Eta => None,
            _ if !v.is_finite() => Some(format!("value must be finite, got {v}")),
            Slot::Nu if v < 0.0 => Some(format!("must be nonnegative, got {v}")),
            Slot::Kappa if v <= 0.0 => Some(format!("must be strictly positive, got {v}")),
            _ => None,
        };
        if let Some(reason) = reason {
            return Err(Error::Coefficient {
                slot: slot.name(),
                node: id,
                reason,
            });
        }
    }
    AdaptedProcess::new(tree, last, values)
}

/// Specs for all five slots, as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpecs {
    pub nu: ModelSpec,
    pub kappa: ModelSpec,
    pub xi: ModelSpec,
    #[serde(alias = "XiT")]
    pub xi_t: ModelSpec,
    pub eta: ModelSpec,
}

#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub nu: AdaptedProcess,
    pub kappa: AdaptedProcess,
    pub xi: AdaptedProcess,
    /// Terminal target per level-`N-1` node, indexed by position in the level.
    pub xi_t: Vec<f64>,
    /// Terminal penalty per level-`N-1` node, indexed by position in the level.
    pub eta: Vec<Penalty>,
    pub x0: f64,
}

impl CoefficientSet {
    pub fn materialize(tree: &ScenarioTree, specs: &CoefficientSpecs, x0: f64) -> Result<Self> {
        if !x0.is_finite() {
            return Err(Error::InvalidInput(format!("x0 must be finite, got {x0}")));
        }
        let last = tree.level(tree.steps() - 1);
        let xi_t = materialize(&specs.xi_t, tree, Slot::XiT)?;
        let eta = materialize(&specs.eta, tree, Slot::Eta)?;
        Ok(Self {
            nu: materialize(&specs.nu, tree, Slot::Nu)?,
            kappa: materialize(&specs.kappa, tree, Slot::Kappa)?,
            xi: materialize(&specs.xi, tree, Slot::Xi)?,
            xi_t: last.clone().map(|id| xi_t.values[id]).collect(),
            eta: last
                .map(|id| {
                    let v = eta.values[id];
                    if v.is_infinite() {
                        Penalty::Infinite
                    } else {
                        Penalty::Finite(v)
                    }
                })
                .collect(),
            x0,
        })
    }

    /// Builds a set from already materialized arrays, checking shapes and signs.
    pub fn from_parts(
        tree: &ScenarioTree,
        nu: AdaptedProcess,
        kappa: AdaptedProcess,
        xi: AdaptedProcess,
        xi_t: Vec<f64>,
        eta: Vec<Penalty>,
        x0: f64,
    ) -> Result<Self> {
        let last = tree.steps() - 1;
        let width = tree.level(last).len();
        for (slot, p) in [(Slot::Nu, &nu), (Slot::Kappa, &kappa), (Slot::Xi, &xi)] {
            if p.last_level != last || p.values.len() != tree.prefix_len(last) {
                return Err(Error::ModelSpec {
                    slot: slot.name(),
                    reason: format!("process must cover levels 0..={last}"),
                });
            }
            let table = ModelSpec::NodeTable {
                values: p.values.clone(),
            };
            materialize(&table, tree, slot)?;
        }
        if xi_t.len() != width || eta.len() != width {
            return Err(Error::InvalidInput(format!(
                "terminal data needs {width} entries per slot"
            )));
        }
        let base = tree.level(last).start;
        for (i, e) in eta.iter().enumerate() {
            if let Penalty::Finite(v) = e {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::Coefficient {
                        slot: "eta",
                        node: base + i,
                        reason: format!("finite penalty must be finite and nonnegative, got {v}"),
                    });
                }
            }
            if !xi_t[i].is_finite() {
                return Err(Error::Coefficient {
                    slot: "xi_t",
                    node: base + i,
                    reason: format!("value must be finite, got {}", xi_t[i]),
                });
            }
        }
        Ok(Self {
            nu,
            kappa,
            xi,
            xi_t,
            eta,
            x0,
        })
    }

    /// Terminal target at a level-`N-1` node id.
    pub fn xi_t_at(&self, tree: &ScenarioTree, id: NodeId) -> f64 {
        self.xi_t[tree.index_in_level(id)]
    }

    pub fn eta_at(&self, tree: &ScenarioTree, id: NodeId) -> Penalty {
        self.eta[tree.index_in_level(id)]
    }

    pub fn has_infinite_penalty(&self) -> bool {
        self.eta.iter().any(|e| e.is_infinite())
    }

    /// Largest finite penalty (0 when there is none).
    pub fn max_finite_penalty(&self) -> f64 {
        self.eta
            .iter()
            .filter_map(|e| match e {
                Penalty::Finite(v) => Some(*v),
                Penalty::Infinite => None,
            })
            .fold(0.0, f64::max)
    }

    /// True when every slot only varies with the level.
    pub fn is_deterministic(&self, tree: &ScenarioTree) -> bool {
        let last = tree.steps() - 1;
        let flat = |p: &AdaptedProcess| {
            (0..=last).all(|k| {
                let v = p.on_level(tree, k);
                v.iter().all(|x| *x == v[0])
            })
        };
        flat(&self.nu)
            && flat(&self.kappa)
            && flat(&self.xi)
            && self.xi_t.iter().all(|x| *x == self.xi_t[0])
            && self.eta.iter().all(|x| *x == self.eta[0])
    }

    pub fn validate(&self, tree: &ScenarioTree) -> ValidationReport {
        validate(self, tree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Lowest failing node id.
    pub witness: Option<NodeId>,
    pub failures: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn into_result(self) -> Result<Self> {
        match self.first_failure() {
            None => Ok(self),
            Some(c) => Err(Error::Coefficient {
                slot: c.name,
                node: c.witness.unwrap_or(0),
                reason: c.detail.clone(),
            }),
        }
    }
}

fn collect_check(
    name: &'static str,
    failing: Vec<NodeId>,
    ok_detail: &str,
    fail_detail: String,
) -> ConditionCheck {
    ConditionCheck {
        name,
        passed: failing.is_empty(),
        witness: failing.first().copied(),
        failures: failing.len(),
        detail: if failing.is_empty() {
            ok_detail.to_string()
        } else {
            fail_detail
        },
    }
}

/// Checks the standing assumptions on the data.
///
/// * `weights`: `nu >= 0`, `kappa > 0`, both finite (finiteness of
///   `sum (nu + 1/kappa) dt` on every path).
/// * `targets`: `xi` and `xi_t` finite.
/// * `nondegenerate`: at every node on levels `0..=N-1`, the conditional
///   probability of `{eta = 0 and no remaining nu mass}` is below one. The
///   probability is computed exactly by a backward sweep.
pub fn validate(set: &CoefficientSet, tree: &ScenarioTree) -> ValidationReport {
    let last = tree.steps() - 1;
    let len = tree.prefix_len(last);

    let weights_bad: Vec<NodeId> = (0..len)
        .filter(|&id| {
            let (nu, kappa) = (set.nu.values[id], set.kappa.values[id]);
            !(nu.is_finite() && nu >= 0.0 && kappa.is_finite() && kappa > 0.0)
        })
        .collect();
    let base = tree.level(last).start;
    let mut targets_bad: Vec<NodeId> = (0..len)
        .filter(|&id| !set.xi.values[id].is_finite())
        .collect();
    targets_bad.extend(
        set.xi_t
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| base + i),
    );
    targets_bad.extend(
        set.eta
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, Penalty::Finite(v) if !(v.is_finite() && *v >= 0.0)))
            .map(|(i, _)| base + i),
    );
    targets_bad.sort_unstable();

    // q = P(eta = 0 and nu_j = 0 for all remaining j | node)
    let mut q = vec![0.0; len];
    for (i, id) in tree.level(last).enumerate() {
        let degenerate = set.eta[i] == Penalty::Finite(0.0) && set.nu.values[id] == 0.0;
        q[id] = if degenerate { 1.0 } else { 0.0 };
    }
    for k in (0..last).rev() {
        for id in tree.level(k) {
            q[id] = if set.nu.values[id] == 0.0 {
                tree.children(id).iter().map(|e| e.prob * q[e.child]).sum()
            } else {
                0.0
            };
        }
    }
    let degenerate: Vec<NodeId> = (0..len).filter(|&id| q[id] >= 1.0 - 1e-14).collect();

    ValidationReport {
        checks: vec![
            collect_check(
                "weights",
                weights_bad,
                "nu >= 0 and kappa > 0 finite on every node",
                "nu must be finite and nonnegative, kappa finite and positive".into(),
            ),
            collect_check(
                "targets",
                targets_bad,
                "running and terminal targets finite",
                "targets must be finite".into(),
            ),
            collect_check(
                "nondegenerate",
                degenerate,
                "no node is surely left without penalty and risk weight",
                "zero terminal penalty and zero remaining risk weight with conditional probability one"
                    .into(),
            ),
        ],
    }
}
