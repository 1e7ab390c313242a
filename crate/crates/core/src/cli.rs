//! Scenario files, run orchestration and report emission.
//!
//! A scenario is a TOML file. [`run`] executes the whole pipeline on it and
//! returns a [`RunReport`]; [`write_outputs`] turns that into `report.json`,
//! `processes.csv`, `trajectories.csv` and one CSV per study table. Every
//! float is written with 17 significant digits, so reports are byte-stable
//! and round-trip exactly.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;

use crate::coefficients::{CoefficientSet, CoefficientSpecs, ModelSpec, Penalty};
use crate::controller::{self, Convention, TrajectoryBundle, DEFAULT_CONSTRAINT_TOL};
use crate::error::{Error, Result};
use crate::lattice::{ScenarioTree, TimeGrid, DEFAULT_NODE_BUDGET};
use crate::oracle::{self, OracleMode};
use crate::riccati::{self, LProcess, RiccatiSolution};
use crate::signal::{self, SignalProcess};

pub const PROCESSES_HEADER: &str = "t,node_id,c,L,xi_hat,w,b,X_hat,u_hat";
pub const TRAJECTORIES_HEADER: &str = "policy,k,t,node_id,parent_id,X,u";

/// Tolerance of checks that hold exactly up to rounding.
const EXACT_TOL: f64 = 1e-12;
/// Tolerance of identities between cost functionals, which sum many terms.
const VALUE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(alias = "T")]
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    pub branching: usize,
    pub seed: u64,
    /// Recombining `±sqrt(dt)` walk; needs binary branching.
    pub recombining: bool,
    /// Recombining walk that also remembers first and last move.
    pub memory: bool,
    pub node_budget: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            branching: 2,
            seed: 0,
            recombining: false,
            memory: false,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Step counts for the refinement table.
    pub refinement: Vec<usize>,
    /// Truncation levels for the n-sweep table.
    pub n_sweep: Vec<f64>,
    pub perturbation_count: usize,
    pub perturbation_scale: f64,
    pub perturbation_density: f64,
    pub perturbation_seed: u64,
    pub bounds_check: bool,
    /// The scenario satisfies the hypotheses of the upper bound.
    pub upper_bound_hypotheses: bool,
    pub integrability_check: bool,
    /// Number of truncation times in the auxiliary functional's window.
    pub jc_window: usize,
    pub constraint_tol: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            refinement: Vec::new(),
            n_sweep: Vec::new(),
            perturbation_count: 0,
            perturbation_scale: 0.5,
            perturbation_density: 1.0,
            perturbation_seed: 0,
            bounds_check: true,
            upper_bound_hypotheses: false,
            integrability_check: true,
            jc_window: 4,
            constraint_tol: DEFAULT_CONSTRAINT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: Option<PathBuf>,
    /// Any of `"json"` and `"csv"`.
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: None,
            formats: vec!["json".into(), "csv".into()],
        }
    }
}

fn default_levels() -> Vec<f64> {
    vec![1e6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub x0: f64,
    /// Increasing truncation levels `n` for `eta ^ n`.
    #[serde(default = "default_levels")]
    pub truncation_levels: Vec<f64>,
    pub grid: GridConfig,
    #[serde(default)]
    pub tree: TreeConfig,
    pub coefficients: CoefficientSpecs,
    #[serde(default)]
    pub studies: StudyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A catalog name or a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::load(path);
        }
        match catalog().iter().find(|(n, _)| *n == name_or_path) {
            Some((_, text)) => Self::parse(text),
            None => Err(Error::Config(format!(
                "{name_or_path}: no such file or catalog scenario"
            ))),
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if !self.x0.is_finite() {
            return bad("x0", format!("must be finite, got {}", self.x0));
        }
        if self.truncation_levels.is_empty() {
            return bad("truncation_levels", "must not be empty".into());
        }
        for (field, levels) in [
            ("truncation_levels", &self.truncation_levels),
            ("studies.n_sweep", &self.studies.n_sweep),
        ] {
            if levels.iter().any(|n| !(*n > 0.0) || !n.is_finite()) {
                return bad(field, "levels must be positive and finite".into());
            }
            if levels.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(field, "levels must be strictly increasing".into());
            }
        }
        if self.studies.refinement.contains(&0) {
            return bad("studies.refinement", "step counts must be positive".into());
        }
        if self.tree.recombining && self.tree.memory {
            return bad("tree", "recombining and memory are exclusive".into());
        }
        if (self.tree.recombining || self.tree.memory) && self.tree.branching != 2 {
            return bad(
                "tree.branching",
                format!("recombining walks are binary, got {}", self.tree.branching),
            );
        }
        if !(self.studies.constraint_tol >= 0.0) {
            return bad("studies.constraint_tol", "must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.studies.perturbation_density) {
            return bad("studies.perturbation_density", "must lie in [0, 1]".into());
        }
        for f in &self.output.formats {
            if f != "json" && f != "csv" {
                return bad("output.formats", format!("unknown format {f:?}"));
            }
        }
        Ok(())
    }

    /// Same scenario on a different number of steps.
    pub fn with_steps(&self, steps: usize) -> Self {
        let mut c = self.clone();
        c.grid.steps = steps;
        c
    }

    pub fn build_tree(&self) -> Result<ScenarioTree> {
        let grid = TimeGrid::new(self.grid.horizon, self.grid.steps)?;
        if self.tree.memory {
            ScenarioTree::memory_walk(grid)
        } else if self.tree.recombining {
            ScenarioTree::recombining_walk(grid)
        } else {
            ScenarioTree::build_with_budget(
                grid,
                self.tree.branching,
                self.tree.seed,
                self.tree.node_budget,
            )
        }
    }

    fn layout(&self) -> &'static str {
        if self.tree.memory {
            "memory_walk"
        } else if self.tree.recombining {
            "recombining_walk"
        } else {
            "tree"
        }
    }
}

/// Built-in scenarios as `(name, TOML text)`.
pub fn catalog() -> &'static [(&'static str, &'static str)] {
    &[
        (
            "constrained-liquidation",
            include_str!("../scenarios/constrained-liquidation.toml"),
        ),
        (
            "penalized-liquidation",
            include_str!("../scenarios/penalized-liquidation.toml"),
        ),
        (
            "random-cost-constrained",
            include_str!("../scenarios/random-cost-constrained.toml"),
        ),
        (
            "mixed-penalty-ternary",
            include_str!("../scenarios/mixed-penalty-ternary.toml"),
        ),
        (
            "terminal-tracking",
            include_str!("../scenarios/terminal-tracking.toml"),
        ),
        (
            "running-target-only",
            include_str!("../scenarios/running-target-only.toml"),
        ),
        (
            "deterministic-schedule",
            include_str!("../scenarios/deterministic-schedule.toml"),
        ),
        (
            "first-step-revealed",
            include_str!("../scenarios/first-step-revealed.toml"),
        ),
        (
            "last-step-revealed",
            include_str!("../scenarios/last-step-revealed.toml"),
        ),
    ]
}

/// All catalog scenarios, parsed.
pub fn catalog_configs() -> Result<Vec<ScenarioConfig>> {
    catalog()
        .iter()
        .map(|(_, t)| ScenarioConfig::parse(t))
        .collect()
}

// ---------------------------------------------------------------------------
// number formatting

/// `{:.16e}` for finite values, `+inf`, `-inf` or `nan` otherwise.
pub fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "+inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:.16e}")
    }
}

/// A float that serializes with 17 significant digits; non-finite values
/// become strings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            let n: serde_json::Number = fmt_real(self.0)
                .parse()
                .map_err(serde::ser::Error::custom)?;
            n.serialize(s)
        } else {
            s.serialize_str(&fmt_real(self.0))
        }
    }
}

fn real_json(x: f64) -> Value {
    serde_json::to_value(Real(x)).expect("real serializes")
}

fn toml_to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => real_json(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => {
            Value::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect())
        }
    }
}

fn spec_json(spec: &ModelSpec) -> Value {
    toml::Value::try_from(spec)
        .map(toml_to_json)
        .unwrap_or(Value::Null)
}

// ---------------------------------------------------------------------------
// study tables

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Real(f64),
    Int(i64),
    Bool(bool),
    Text(String),
    Missing,
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Real(x) => Some(*x),
            Cell::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    fn csv(&self) -> String {
        match self {
            Cell::Real(x) => fmt_real(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Bool(b) => if *b { "pass" } else { "fail" }.into(),
            Cell::Text(t) => t.clone(),
            Cell::Missing => String::new(),
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cell::Real(x) => Real(*x).serialize(s),
            Cell::Int(i) => s.serialize_i64(*i),
            Cell::Bool(b) => s.serialize_bool(*b),
            Cell::Text(t) => s.serialize_str(t),
            Cell::Missing => s.serialize_none(),
        }
    }
}

fn opt_cell(x: Option<f64>) -> Cell {
    x.map_or(Cell::Missing, Cell::Real)
}

#[derive(Debug, Clone, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[j]).collect())
    }

    /// Numeric column with `NaN` for non-numeric cells.
    pub fn reals(&self, name: &str) -> Vec<f64> {
        self.column(name)
            .map(|c| {
                c.into_iter()
                    .map(|x| x.as_f64().unwrap_or(f64::NAN))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::csv).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioEcho {
    pub name: String,
    pub description: String,
    pub x0: Real,
    pub horizon: Real,
    pub steps: usize,
    pub layout: String,
    pub branching: usize,
    pub seed: u64,
    pub truncation_levels: Vec<Real>,
    pub coefficients: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatticeSummary {
    pub kind: String,
    pub steps: usize,
    pub dt: Real,
    pub nodes: usize,
    pub edges: usize,
    pub terminal_nodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationEntry {
    pub name: String,
    pub passed: bool,
    pub failures: usize,
    pub witness: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsSummary {
    pub lower_violations: usize,
    pub lower_min_margin: Real,
    pub lower_witness: Option<usize>,
    pub upper_checked: bool,
    pub upper_violations: Option<usize>,
    pub upper_min_margin: Option<Real>,
    pub upper_witness: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrabilitySummary {
    pub vacuous: bool,
    pub probability: Real,
    pub max: Real,
    pub mean: Real,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSummary {
    /// Root of the minimal limit (the untruncated problem).
    pub c0: Real,
    /// Root at the largest truncation level.
    pub c0_truncated: Real,
    pub truncation_max: Real,
    pub min_c: Real,
    pub recursion_residual: Real,
    pub martingale_mean_defect: Real,
    pub monotone_min_increment: Real,
    pub converged: bool,
    pub limit_gap: Real,
    pub oracle_gap: Real,
    pub closed_form: Option<Real>,
    pub closed_form_error: Option<Real>,
    pub ode_c0: Option<Real>,
    pub ode_error: Option<Real>,
    pub l_supermartingale_violation: Option<Real>,
    pub bounds: Option<BoundsSummary>,
    pub integrability: Option<IntegrabilitySummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SignalSummary {
    pub xi_hat0: Real,
    pub w0: Real,
    pub b0: Real,
    pub ell0: Real,
    pub kernel0: Real,
    pub identity_residual: Real,
    pub max_kernel_residual: Real,
    pub max_exp_kernel_residual: Real,
    pub representation_gap: Real,
    pub convex_combination_residual: Option<Real>,
    pub martingale_defect: Option<Real>,
    pub b_drift_residual: Real,
    pub b_terminal_gap: Real,
    pub predictability: Real,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueFormulaOut {
    pub initial: Real,
    pub tracking: Real,
    pub signal_variation: Real,
    pub total: Real,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionOut {
    pub convention: Convention,
    pub initial: Real,
    pub tracking: Real,
    pub signal_variation: Real,
    pub mismatch: Real,
    pub total: Real,
    pub expected_terminal: Real,
    pub max_martingale_drift: Real,
    pub a_decreases: usize,
}

impl From<&controller::Decomposition> for DecompositionOut {
    fn from(d: &controller::Decomposition) -> Self {
        Self {
            convention: d.convention,
            initial: Real(d.initial),
            tracking: Real(d.tracking),
            signal_variation: Real(d.signal_variation),
            mismatch: Real(d.mismatch),
            total: Real(d.total()),
            expected_terminal: Real(d.expected_terminal),
            max_martingale_drift: Real(d.max_martingale_drift),
            a_decreases: d.a_decreases,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostSummary {
    pub value_formula: ValueFormulaOut,
    pub j_eta: Option<Real>,
    pub j_c: Option<Real>,
    pub j_c_table: Vec<(usize, Real)>,
    pub feedback_constraint_gap: Option<Real>,
    pub decomposition_exact: Option<DecompositionOut>,
    pub decomposition_continuum: Option<DecompositionOut>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub value_x0: Real,
    pub twin_gap: Real,
    pub signal_gap: Real,
    pub min_discriminant: Real,
    pub control_gap: Option<Real>,
    pub state_gap: Option<Real>,
    pub value_gap: Option<Real>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Holds exactly up to rounding; a failure means a defect.
    Exact,
    /// Guaranteed under the scenario's declared hypotheses.
    Theorem,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub passed: bool,
    pub value: Real,
    pub tolerance: Real,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Skipped {
    pub section: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Studies {
    pub truncation: Table,
    pub n_sweep: Option<Table>,
    pub perturbation: Option<Table>,
    pub refinement: Option<Table>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: ScenarioEcho,
    pub lattice: LatticeSummary,
    pub validation: Vec<ValidationEntry>,
    pub riccati: RiccatiSummary,
    pub signal: SignalSummary,
    pub cost: CostSummary,
    pub oracle: OracleSummary,
    pub studies: Studies,
    pub checks: Vec<Check>,
    pub skipped: Vec<Skipped>,
    #[serde(skip)]
    pub processes_csv: String,
    #[serde(skip)]
    pub trajectories_csv: String,
}

impl RunReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed_exact(&self) -> Vec<&Check> {
        self.checks
            .iter()
            .filter(|c| c.kind == CheckKind::Exact && !c.passed)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Process exit code for an error: 2 for bad input, 3 for a broken
/// internal identity, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Validation(_)
        | Error::Coefficient { .. }
        | Error::ModelSpec { .. }
        | Error::InvalidGrid(_)
        | Error::InvalidTree(_)
        | Error::NodeBudget { .. }
        | Error::InvalidInput(_) => 2,
        Error::Consistency(_) => 3,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------
// pipeline

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

struct Checks(Vec<Check>);

impl Checks {
    fn at_most(
        &mut self,
        name: &str,
        kind: CheckKind,
        value: f64,
        tol: f64,
        detail: impl Into<String>,
    ) {
        self.0.push(Check {
            name: name.into(),
            kind,
            passed: value <= tol,
            value: Real(value),
            tolerance: Real(tol),
            detail: detail.into(),
        });
    }
}

/// Tree, coefficients and validation outcome.
pub struct Prepared {
    pub tree: ScenarioTree,
    pub coeffs: CoefficientSet,
    pub validation: Vec<ValidationEntry>,
}

pub fn prepare(config: &ScenarioConfig) -> Result<Prepared> {
    let tree = config.build_tree()?;
    let coeffs = CoefficientSet::materialize(&tree, &config.coefficients, config.x0)?;
    let report = coeffs.validate(&tree);
    if let Some(f) = report.first_failure() {
        let at = f
            .witness
            .map(|w| format!(" at node {w}"))
            .unwrap_or_default();
        return Err(Error::Validation(format!("{}: {}{at}", f.name, f.detail)));
    }
    let validation = report
        .checks
        .iter()
        .map(|c| ValidationEntry {
            name: c.name.into(),
            passed: c.passed,
            failures: c.failures,
            witness: c.witness,
            detail: c.detail.clone(),
        })
        .collect();
    Ok(Prepared {
        tree,
        coeffs,
        validation,
    })
}

/// Weight, discounted process and signal for one terminal choice.
pub struct Solved {
    pub riccati: RiccatiSolution,
    pub l: std::result::Result<LProcess, String>,
    pub signal: SignalProcess,
    pub feedback: std::result::Result<TrajectoryBundle, String>,
}

pub fn solve_and_track(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    riccati: RiccatiSolution,
) -> Result<Solved> {
    let l = riccati::compute_l(tree, coeffs, &riccati).map_err(|e| e.to_string());
    let signal = signal::compute_signal(tree, coeffs, &riccati, l.as_ref().ok())?;
    let feedback =
        controller::simulate_feedback(tree, coeffs, &riccati, &signal).map_err(|e| e.to_string());
    Ok(Solved {
        riccati,
        l,
        signal,
        feedback,
    })
}

fn constant_value(spec: &ModelSpec) -> Option<f64> {
    match spec {
        ModelSpec::Constant { value } => Some(*value),
        _ => None,
    }
}

fn penalty(v: f64) -> Penalty {
    if v == f64::INFINITY {
        Penalty::Infinite
    } else {
        Penalty::Finite(v)
    }
}

/// `(nu, kappa, eta)` when all three are declared constant.
fn constants(config: &ScenarioConfig) -> Option<(f64, f64, Penalty)> {
    let c = &config.coefficients;
    Some((
        constant_value(&c.nu)?,
        constant_value(&c.kappa)?,
        penalty(constant_value(&c.eta)?),
    ))
}

/// Continuum weight at time zero for constant coefficients.
fn closed_form(config: &ScenarioConfig) -> Option<f64> {
    let (nu, kappa, eta) = constants(config)?;
    riccati::closed_form_constant(nu, kappa, eta, 0.0, config.grid.horizon).ok()
}

fn level_values(tree: &ScenarioTree, p: &crate::lattice::AdaptedProcess) -> Vec<f64> {
    (0..tree.steps())
        .map(|k| p.values[tree.level(k).start])
        .collect()
}

/// One row per truncation level: root weight, truncated cost of the matching
/// feedback, the value formula and the oracle value.
pub fn truncation_table(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    levels: &[f64],
    name: &str,
) -> Result<Table> {
    let rows: Vec<Result<Vec<Cell>>> = levels
        .par_iter()
        .map(|&n| {
            let sol = riccati::solve_discrete_bsrde(tree, coeffs, n)?;
            let s = solve_and_track(tree, coeffs, sol)?;
            let dp = oracle::dp_solve(tree, coeffs, OracleMode::Truncated(n))?;
            let twin = s
                .riccati
                .c
                .values
                .iter()
                .zip(&dp.alpha)
                .map(|(a, b)| rel(*a, *b))
                .fold(0.0, f64::max);
            let vf = controller::optimal_value_formula(tree, coeffs, &s.riccati, &s.signal).total;
            let jn = s
                .feedback
                .as_ref()
                .ok()
                .map(|t| controller::evaluate_j_n(tree, coeffs, t, n));
            let gap = s
                .feedback
                .as_ref()
                .ok()
                .map(|t| t.max_constraint_gap(tree, coeffs));
            Ok(vec![
                Cell::Real(n),
                Cell::Real(s.riccati.root()),
                opt_cell(jn),
                Cell::Real(vf),
                Cell::Real(dp.value(0, coeffs.x0)),
                Cell::Real(twin),
                opt_cell(gap),
            ])
        })
        .collect();
    let mut table = Table::new(
        name,
        &[
            "n",
            "c0",
            "j_n",
            "value_formula",
            "oracle_value",
            "twin_gap",
            "constraint_gap",
            "monotone",
        ],
    );
    let mut prev = f64::NEG_INFINITY;
    for r in rows {
        let mut r = r?;
        let c0 = r[1].as_f64().unwrap_or(f64::NAN);
        r.push(Cell::Bool(c0 >= prev));
        prev = c0;
        table.rows.push(r);
    }
    Ok(table)
}

/// Perturbed feedback policies against the optimal one. Rows with an
/// infinite cost are kept; residuals are reported only where both costs are
/// finite.
pub fn perturbation_table(
    config: &ScenarioConfig,
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    solved: &Solved,
    count: usize,
) -> std::result::Result<Table, String> {
    let opt = solved.feedback.as_ref().map_err(|e| e.clone())?;
    let st = &config.studies;
    let tol = st.constraint_tol;
    let n = tree.steps();
    let j_opt = controller::evaluate_j_c(
        tree,
        coeffs,
        &solved.riccati,
        &solved.signal,
        opt,
        st.jc_window,
        tol,
    )
    .value;
    let mut family = controller::perturbation_family(
        tree,
        count,
        st.perturbation_seed,
        st.perturbation_scale,
        st.perturbation_density,
        0..n,
    );
    // keep the hard constraint reachable
    for bumps in &mut family {
        for (i, id) in tree.level(n - 1).enumerate() {
            if coeffs.eta[i].is_infinite() {
                bumps[id] = 0.0;
            }
        }
    }
    let rows: Vec<std::result::Result<Vec<Cell>, String>> = family
        .par_iter()
        .enumerate()
        .map(|(j, bumps)| {
            let traj = controller::simulate_perturbed(
                tree,
                coeffs,
                &solved.riccati,
                &solved.signal,
                bumps,
            )
            .map_err(|e| e.to_string())?;
            let jc = controller::evaluate_j_c(
                tree,
                coeffs,
                &solved.riccati,
                &solved.signal,
                &traj,
                st.jc_window,
                tol,
            )
            .value;
            let je = controller::evaluate_j_eta(tree, coeffs, &traj, tol).value;
            let ex = controller::decompose_costs(
                tree,
                coeffs,
                &solved.riccati,
                &solved.signal,
                &traj,
                Convention::DiscreteExact,
                tol,
            );
            let co = controller::decompose_costs(
                tree,
                coeffs,
                &solved.riccati,
                &solved.signal,
                &traj,
                Convention::Continuum,
                tol,
            );
            let gap = jc - j_opt;
            let residual = if gap.is_finite() && ex.mismatch.is_finite() {
                Some((gap - ex.mismatch).abs() / 1f64.max(j_opt.abs()))
            } else {
                None
            };
            Ok(vec![
                Cell::Int(j as i64),
                Cell::Real(jc),
                Cell::Real(je),
                Cell::Real(j_opt),
                Cell::Real(gap),
                Cell::Real(ex.mismatch),
                opt_cell(residual),
                Cell::Int(ex.a_decreases as i64),
                Cell::Real(ex.max_martingale_drift),
                Cell::Real(co.max_martingale_drift),
                Cell::Bool(jc >= j_opt - VALUE_TOL * 1f64.max(j_opt.abs())),
            ])
        })
        .collect();
    let mut table = Table::new(
        "perturbation",
        &[
            "index",
            "j_c",
            "j_eta",
            "j_c_optimal",
            "gap",
            "mismatch",
            "residual",
            "a_decreases",
            "martingale_drift_exact",
            "martingale_drift_continuum",
            "dominated",
        ],
    );
    for r in rows {
        table.rows.push(r?);
    }
    Ok(table)
}

fn refinement_row(config: &ScenarioConfig, steps: usize, closed: Option<f64>) -> Vec<Cell> {
    let cfg = config.with_steps(steps);
    let dt = cfg.grid.horizon / steps as f64;
    let head = vec![Cell::Int(steps as i64), Cell::Real(dt)];
    let body = (|| -> Result<Vec<Cell>> {
        let p = prepare(&cfg)?;
        let (tree, coeffs) = (&p.tree, &p.coeffs);
        let s = solve_and_track(tree, coeffs, riccati::solve_minimal_limit(tree, coeffs)?)?;
        let c0 = s.riccati.root();
        let err = closed.map(|c| (c0 - c).abs());
        let w = signal::compute_weight(tree, coeffs, &s.riccati, &s.signal)?;
        let vf = controller::optimal_value_formula(tree, coeffs, &s.riccati, &s.signal).total;
        let pf = signal::predictability_functional(tree, &coeffs.xi_t)?;
        let top = *cfg.truncation_levels.last().expect("nonempty levels");
        let trunc = solve_and_track(
            tree,
            coeffs,
            riccati::solve_discrete_bsrde(tree, coeffs, top)?,
        )?;
        let tgap = trunc
            .feedback
            .as_ref()
            .ok()
            .map(|t| t.max_constraint_gap(tree, coeffs));
        Ok(vec![
            Cell::Real(c0),
            opt_cell(closed),
            opt_cell(err),
            opt_cell(err.map(|e| e * steps as f64)),
            Cell::Real(s.signal.root()),
            Cell::Real(w.w.values[0]),
            Cell::Real(vf),
            Cell::Real(pf),
            opt_cell(tgap),
            Cell::Real(w.max_kernel_residual),
            Cell::Real(w.max_exp_kernel_residual),
            opt_cell(constants(&cfg).map(|(nu, kappa, eta)| {
                signal::kernel_continuum_gap(tree, &s.signal, nu, kappa, eta)
            })),
        ])
    })();
    let mut row = head;
    match body {
        Ok(b) => {
            row.extend(b);
            row.push(Cell::Missing);
        }
        Err(e) => {
            row.extend((0..12).map(|_| Cell::Missing));
            row.push(Cell::Text(e.to_string().replace(',', ";")));
        }
    }
    row
}

/// Re-runs the scenario for each step count.
pub fn refinement_table(config: &ScenarioConfig, steps: &[usize]) -> Table {
    let closed = closed_form(config);
    let mut table = Table::new(
        "refinement",
        &[
            "N",
            "dt",
            "c0",
            "closed_form",
            "c0_error",
            "c0_error_times_N",
            "xi_hat0",
            "w0",
            "value",
            "predictability",
            "truncated_constraint_gap",
            "kernel_residual",
            "exp_kernel_residual",
            "kernel_continuum_gap",
            "error",
        ],
    );
    table.rows = steps
        .par_iter()
        .map(|&n| refinement_row(config, n, closed))
        .collect();
    table
}

/// Executes the full pipeline on one scenario.
pub fn run(config: &ScenarioConfig) -> Result<RunReport> {
    let Prepared {
        tree,
        coeffs,
        validation,
    } = prepare(config)?;
    let tree = &tree;
    let coeffs = &coeffs;
    let st = &config.studies;
    let tol = st.constraint_tol;
    let n = tree.steps();
    let dt = tree.grid().dt();
    let mut checks = Checks(Vec::new());
    let mut skipped = Vec::new();
    let mut skip = |section: &str, reason: String| {
        skipped.push(Skipped {
            section: section.into(),
            reason,
        })
    };

    // weight
    let mono = riccati::minimal_supersolution(tree, coeffs, &config.truncation_levels)?;
    let primary = match &mono.limit {
        Some(l) => l.clone(),
        None => riccati::solve_minimal_limit(tree, coeffs)?,
    };
    let solved = solve_and_track(tree, coeffs, primary)?;
    let r = &solved.riccati;
    let sig = &solved.signal;
    let recursion = r.self_consistency(tree, coeffs);
    checks.at_most(
        "riccati.recursion",
        CheckKind::Exact,
        recursion,
        EXACT_TOL,
        "one-step recursion re-evaluated",
    );
    checks.at_most(
        "riccati.positive",
        CheckKind::Exact,
        if r.min_value() > 0.0 { 0.0 } else { 1.0 },
        0.0,
        format!("smallest weight {}", r.min_value()),
    );
    let mdef = r.martingale_mean_defect(tree);
    checks.at_most(
        "riccati.martingale_part",
        CheckKind::Exact,
        mdef,
        EXACT_TOL,
        "conditional mean of the martingale increments",
    );
    let max_c = mono.solution.c.values.iter().copied().fold(0.0, f64::max);
    checks.at_most(
        "riccati.monotone_in_n",
        CheckKind::Exact,
        (-mono.min_increment / max_c).max(0.0),
        1e-14,
        "node-wise increase along the truncation sequence",
    );
    if coeffs.has_infinite_penalty() {
        checks.at_most(
            "riccati.limit_matches_oracle",
            CheckKind::Exact,
            mono.oracle_gap,
            EXACT_TOL,
            "minimal limit against the constrained program",
        );
    }
    let closed = closed_form(config);
    let ode = if coeffs.is_deterministic(tree) && coeffs.eta.windows(2).all(|w| w[0] == w[1]) {
        match riccati::solve_ode_deterministic(
            &level_values(tree, &coeffs.nu),
            &level_values(tree, &coeffs.kappa),
            coeffs.eta[0],
            tree.grid(),
        ) {
            Ok(o) => Some(o.c[0]),
            Err(e) => {
                skip("riccati.ode", e.to_string());
                None
            }
        }
    } else {
        None
    };
    let l_violation = match &solved.l {
        Ok(l) => {
            let v = l.supermartingale_violation(tree);
            checks.at_most(
                "l.supermartingale",
                CheckKind::Exact,
                v,
                EXACT_TOL,
                "relative upward drift of L",
            );
            Some(v)
        }
        Err(e) => {
            skip("l", e.clone());
            None
        }
    };
    let bounds = if st.bounds_check {
        match riccati::check_bounds(tree, coeffs, r, st.upper_bound_hypotheses) {
            Ok(b) => {
                checks.at_most(
                    "riccati.lower_bound",
                    CheckKind::Theorem,
                    b.lower_side.violations as f64,
                    0.0,
                    format!("smallest relative margin {}", b.lower_side.min_margin),
                );
                if let Some(u) = &b.upper_side {
                    checks.at_most(
                        "riccati.upper_bound",
                        CheckKind::Theorem,
                        u.violations as f64,
                        0.0,
                        format!("smallest relative margin {}", u.min_margin),
                    );
                }
                Some(BoundsSummary {
                    lower_violations: b.lower_side.violations,
                    lower_min_margin: Real(b.lower_side.min_margin),
                    lower_witness: b.lower_side.witness,
                    upper_checked: b.upper_side.is_some(),
                    upper_violations: b.upper_side.as_ref().map(|u| u.violations),
                    upper_min_margin: b.upper_side.as_ref().map(|u| Real(u.min_margin)),
                    upper_witness: b.upper_side.as_ref().and_then(|u| u.witness),
                })
            }
            Err(e) => {
                skip("riccati.bounds", e.to_string());
                None
            }
        }
    } else {
        None
    };
    let integrability = st.integrability_check.then(|| {
        let i = riccati::check_integrability_condition(tree, coeffs, r);
        IntegrabilitySummary {
            vacuous: i.vacuous,
            probability: Real(i.probability),
            max: Real(i.max),
            mean: Real(i.mean),
        }
    });
    let riccati_summary = RiccatiSummary {
        c0: Real(r.root()),
        c0_truncated: Real(mono.solution.root()),
        truncation_max: Real(*config.truncation_levels.last().expect("nonempty levels")),
        min_c: Real(r.min_value()),
        recursion_residual: Real(recursion),
        martingale_mean_defect: Real(mdef),
        monotone_min_increment: Real(mono.min_increment),
        converged: mono.converged,
        limit_gap: Real(mono.limit_gap),
        oracle_gap: Real(mono.oracle_gap),
        closed_form: closed.map(Real),
        closed_form_error: closed.map(|c| Real((r.root() - c).abs())),
        ode_c0: ode.map(Real),
        ode_error: ode.map(|c| Real((r.root() - c).abs())),
        l_supermartingale_violation: l_violation.map(Real),
        bounds,
        integrability,
    };

    // signal
    let weight = signal::compute_weight(tree, coeffs, r, sig)?;
    let identity = (0..sig.kernel.len())
        .map(|id| {
            let c = r.c.values[id];
            if c.is_finite() {
                ((sig.ell[id] + sig.kernel[id]) - c).abs() / c
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    checks.at_most(
        "signal.weight_split",
        CheckKind::Exact,
        identity,
        EXACT_TOL,
        "c = E[L_T]/D + kernel mass",
    );
    checks.at_most(
        "weight.range",
        CheckKind::Theorem,
        weight.out_of_range.len() as f64,
        0.0,
        weight
            .out_of_range
            .first()
            .map(|id| format!("first at node {id}"))
            .unwrap_or_default(),
    );
    checks.at_most(
        "weight.representation",
        CheckKind::Exact,
        weight.representation_gap,
        EXACT_TOL,
        "w = 1 - K/c",
    );
    let convex = signal::convex_combination_residual(tree, sig, &weight);
    if let Some(cv) = convex {
        checks.at_most(
            "signal.convex_combination",
            CheckKind::Exact,
            cv,
            1e-10,
            "xi_hat from target average and kernel average",
        );
    }
    let mart = sig.martingale_defect(tree);
    match (&sig.path, mart) {
        (Ok(_), Some(m)) => checks.at_most(
            "signal.martingale",
            CheckKind::Exact,
            m,
            1e-10,
            "B + Y is a martingale",
        ),
        (Err(e), _) => skip("signal.path_parts", e.clone()),
        _ => {}
    }
    let bres = signal::compute_b(tree, coeffs, r, sig);
    let pf = signal::predictability_functional(tree, &coeffs.xi_t)?;
    let signal_summary = SignalSummary {
        xi_hat0: Real(sig.root()),
        w0: Real(weight.w.values[0]),
        b0: Real(sig.b.values[0]),
        ell0: Real(sig.ell[0]),
        kernel0: Real(sig.kernel[0]),
        identity_residual: Real(identity),
        max_kernel_residual: Real(weight.max_kernel_residual),
        max_exp_kernel_residual: Real(weight.max_exp_kernel_residual),
        representation_gap: Real(weight.representation_gap),
        convex_combination_residual: convex.map(Real),
        martingale_defect: mart.map(Real),
        b_drift_residual: Real(bres.max_drift_residual),
        b_terminal_gap: Real(bres.terminal_gap),
        predictability: Real(pf),
    };

    // oracle
    let dp = oracle::dp_solve(tree, coeffs, OracleMode::Constrained)?;
    let twin =
        r.c.values
            .iter()
            .zip(&dp.alpha)
            .map(|(a, b)| rel(*a, *b))
            .fold(0.0, f64::max);
    checks.at_most(
        "oracle.riccati_twin",
        CheckKind::Exact,
        twin,
        EXACT_TOL,
        "dynamic program quadratic coefficient against c",
    );
    let sgap = (0..dp.alpha.len())
        .map(|id| rel(dp.centre(id), sig.xi_hat.values[id]))
        .fold(0.0, f64::max);
    checks.at_most(
        "oracle.signal_twin",
        CheckKind::Exact,
        sgap,
        1e-10,
        "dynamic program centre against xi_hat",
    );
    let value_x0 = dp.value(0, coeffs.x0);

    // costs
    let vf = controller::optimal_value_formula(tree, coeffs, r, sig);
    let value_formula = ValueFormulaOut {
        initial: Real(vf.initial),
        tracking: Real(vf.tracking),
        signal_variation: Real(vf.signal_variation),
        total: Real(vf.total),
    };
    checks.at_most(
        "cost.oracle_value",
        CheckKind::Exact,
        rel(value_x0, vf.total),
        VALUE_TOL,
        "value formula against the dynamic program",
    );
    let mut cost = CostSummary {
        value_formula,
        j_eta: None,
        j_c: None,
        j_c_table: Vec::new(),
        feedback_constraint_gap: None,
        decomposition_exact: None,
        decomposition_continuum: None,
    };
    let mut oracle_summary = OracleSummary {
        value_x0: Real(value_x0),
        twin_gap: Real(twin),
        signal_gap: Real(sgap),
        min_discriminant: Real(dp.min_discriminant()),
        control_gap: None,
        state_gap: None,
        value_gap: None,
    };
    match &solved.feedback {
        Ok(fb) => {
            let je = controller::evaluate_j_eta(tree, coeffs, fb, tol);
            let jc = controller::evaluate_j_c(tree, coeffs, r, sig, fb, st.jc_window, tol);
            let ex = controller::decompose_costs(
                tree,
                coeffs,
                r,
                sig,
                fb,
                Convention::DiscreteExact,
                tol,
            );
            let co =
                controller::decompose_costs(tree, coeffs, r, sig, fb, Convention::Continuum, tol);
            checks.at_most(
                "cost.feedback_constraint",
                CheckKind::Exact,
                je.max_constraint_gap,
                tol,
                "|X_N - xi_t| where the penalty is infinite",
            );
            checks.at_most(
                "cost.value_identity",
                CheckKind::Exact,
                rel(je.value, vf.total),
                VALUE_TOL,
                "J under feedback against the value formula",
            );
            checks.at_most(
                "cost.auxiliary_value",
                CheckKind::Exact,
                rel(jc.value, vf.total),
                VALUE_TOL,
                "auxiliary functional under feedback",
            );
            checks.at_most(
                "cost.decomposition",
                CheckKind::Exact,
                rel(ex.total(), je.value),
                VALUE_TOL,
                "decomposition terms sum to J",
            );
            checks.at_most(
                "cost.martingale_drift",
                CheckKind::Exact,
                ex.max_martingale_drift / 1f64.max(vf.total.abs()),
                VALUE_TOL,
                "conditional drift of the remainder",
            );
            checks.at_most(
                "cost.a_nondecreasing",
                CheckKind::Theorem,
                ex.a_decreases as f64,
                0.0,
                "edges where A decreased",
            );
            cost.j_eta = Some(Real(je.value));
            cost.j_c = Some(Real(jc.value));
            cost.j_c_table = jc.table.iter().map(|(k, v)| (*k, Real(*v))).collect();
            cost.feedback_constraint_gap = Some(Real(je.max_constraint_gap));
            cost.decomposition_exact = Some((&ex).into());
            cost.decomposition_continuum = Some((&co).into());
            oracle_summary.value_gap = Some(Real(rel(value_x0, je.value)));
            match controller::simulate_oracle(tree, coeffs, &dp)
                .and_then(|o| oracle::compare_policies(fb, &o))
            {
                Ok(cmp) => {
                    let scale = 1f64.max(fb.u.iter().fold(0.0, |a, u| a.max(u.abs())));
                    checks.at_most(
                        "oracle.feedback_match",
                        CheckKind::Exact,
                        cmp.max_control_gap / scale,
                        VALUE_TOL,
                        "feedback against the dynamic program's control",
                    );
                    oracle_summary.control_gap = Some(Real(cmp.max_control_gap));
                    oracle_summary.state_gap = Some(Real(cmp.max_state_gap));
                }
                Err(e) => skip("oracle.trajectory", e.to_string()),
            }
        }
        Err(e) => skip("cost", e.clone()),
    }

    // studies
    let truncation = truncation_table(tree, coeffs, &config.truncation_levels, "truncation")?;
    identity_checks(&mut checks, &truncation);
    let n_sweep = if st.n_sweep.is_empty() {
        None
    } else {
        let t = truncation_table(tree, coeffs, &st.n_sweep, "n_sweep")?;
        let bad = t.column("monotone").map_or(0, |c| {
            c.iter().filter(|x| **x == &Cell::Bool(false)).count()
        });
        checks.at_most(
            "study.n_sweep_monotone",
            CheckKind::Exact,
            bad as f64,
            0.0,
            "root weight along the n-sweep",
        );
        Some(t)
    };
    let perturbation = if st.perturbation_count == 0 {
        None
    } else {
        match perturbation_table(config, tree, coeffs, &solved, st.perturbation_count) {
            Ok(t) => {
                let res = t
                    .reals("residual")
                    .into_iter()
                    .filter(|x| !x.is_nan())
                    .fold(0.0, f64::max);
                checks.at_most(
                    "cost.perturbation_gap",
                    CheckKind::Exact,
                    res,
                    VALUE_TOL,
                    "auxiliary gap against the mismatch term",
                );
                let undominated = t.column("dominated").map_or(0, |c| {
                    c.iter().filter(|x| **x == &Cell::Bool(false)).count()
                });
                checks.at_most(
                    "cost.domination",
                    CheckKind::Theorem,
                    undominated as f64,
                    0.0,
                    "perturbed policies costing less than feedback",
                );
                let dec: f64 = t.reals("a_decreases").iter().sum();
                checks.at_most(
                    "cost.perturbed_a_nondecreasing",
                    CheckKind::Theorem,
                    dec,
                    0.0,
                    "edges where A decreased",
                );
                Some(t)
            }
            Err(e) => {
                skip("studies.perturbation", e);
                None
            }
        }
    };
    let refinement = (!st.refinement.is_empty()).then(|| refinement_table(config, &st.refinement));

    let lattice = LatticeSummary {
        kind: config.layout().into(),
        steps: n,
        dt: Real(dt),
        nodes: tree.len(),
        edges: tree.edges().len(),
        terminal_nodes: tree.level(n - 1).len(),
        seed: tree.seed(),
    };
    let c = &config.coefficients;
    let scenario = ScenarioEcho {
        name: config.name.clone(),
        description: config.description.clone(),
        x0: Real(config.x0),
        horizon: Real(config.grid.horizon),
        steps: n,
        layout: config.layout().into(),
        branching: config.tree.branching,
        seed: config.tree.seed,
        truncation_levels: config.truncation_levels.iter().map(|x| Real(*x)).collect(),
        coefficients: serde_json::json!({
            "nu": spec_json(&c.nu),
            "kappa": spec_json(&c.kappa),
            "xi": spec_json(&c.xi),
            "xi_t": spec_json(&c.xi_t),
            "eta": spec_json(&c.eta),
        }),
    };
    let processes_csv = processes_csv(tree, coeffs, &solved, &weight);
    let trajectories_csv = trajectories_csv(tree, coeffs, &solved, &dp);
    Ok(RunReport {
        scenario,
        lattice,
        validation,
        riccati: riccati_summary,
        signal: signal_summary,
        cost,
        oracle: oracle_summary,
        studies: Studies {
            truncation,
            n_sweep,
            perturbation,
            refinement,
        },
        checks: checks.0,
        skipped,
        processes_csv,
        trajectories_csv,
    })
}

fn identity_checks(checks: &mut Checks, t: &Table) {
    let twin = t.reals("twin_gap").into_iter().fold(0.0, f64::max);
    checks.at_most(
        "oracle.truncated_twin",
        CheckKind::Exact,
        twin,
        EXACT_TOL,
        "truncated dynamic program against c^(n)",
    );
    let jn = t.reals("j_n");
    let vf = t.reals("value_formula");
    let ov = t.reals("oracle_value");
    let worst = jn
        .iter()
        .zip(&vf)
        .zip(&ov)
        .filter(|((j, _), _)| !j.is_nan())
        .map(|((j, v), o)| rel(*j, *v).max(rel(*o, *v)))
        .fold(0.0, f64::max);
    checks.at_most(
        "truncation.value_identity",
        CheckKind::Exact,
        worst,
        VALUE_TOL,
        "J^(n) under feedback, value formula and oracle",
    );
}

fn blank_or(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn processes_csv(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    s: &Solved,
    weight: &signal::WeightReport,
) -> String {
    let n = tree.steps();
    let mut out = String::from(PROCESSES_HEADER);
    out.push('\n');
    let fb = s.feedback.as_ref().ok();
    let l = s.l.as_ref().ok();
    for node in tree.nodes() {
        let id = node.id;
        let t = tree.grid().time(node.level);
        let x = fb.map(|f| f.x[id]);
        let row = if node.level < n {
            [
                Some(s.riccati.c.values[id]),
                l.map(|l| l.l.values[id]),
                Some(s.signal.xi_hat.values[id]),
                Some(weight.w.values[id]),
                Some(s.signal.b.values[id]),
                x,
                fb.map(|f| f.u[id]),
            ]
        } else if let Some(p) = node.parent(tree) {
            let i = tree.index_in_level(p);
            let cn = s.riccati.terminal[i];
            let target = coeffs.xi_t[i];
            [
                Some(cn),
                l.map(|l| l.l_terminal[i]),
                Some(target),
                Some(1.0),
                cn.is_finite().then(|| cn * target),
                x,
                None,
            ]
        } else {
            [None, None, None, None, None, x, None]
        };
        out.push_str(&format!("{},{id}", fmt_real(t)));
        for v in row {
            out.push(',');
            out.push_str(&blank_or(v));
        }
        out.push('\n');
    }
    out
}

fn trajectories_csv(
    tree: &ScenarioTree,
    coeffs: &CoefficientSet,
    s: &Solved,
    dp: &oracle::QuadraticValue,
) -> String {
    let n = tree.steps();
    let mut out = String::from(TRAJECTORIES_HEADER);
    out.push('\n');
    let oracle_traj = controller::simulate_oracle(tree, coeffs, dp).ok();
    for (name, traj) in [
        ("feedback", s.feedback.as_ref().ok()),
        ("oracle", oracle_traj.as_ref()),
    ] {
        let Some(traj) = traj else { continue };
        for node in tree.nodes() {
            let id = node.id;
            let parent = node.parent(tree).map(|p| p.to_string()).unwrap_or_default();
            let u = (node.level < n).then(|| traj.u[id]);
            out.push_str(&format!(
                "{name},{},{},{id},{parent},{},{}\n",
                node.level,
                fmt_real(tree.grid().time(node.level)),
                fmt_real(traj.x[id]),
                blank_or(u)
            ));
        }
    }
    out
}

/// Writes the report files into `dir` and returns their paths.
pub fn write_outputs(
    config: &ScenarioConfig,
    report: &RunReport,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    let formats = &config.output.formats;
    if formats.iter().any(|f| f == "json") {
        put("report.json", &report.to_json())?;
    }
    if formats.iter().any(|f| f == "csv") {
        put("processes.csv", &report.processes_csv)?;
        put("trajectories.csv", &report.trajectories_csv)?;
        let s = &report.studies;
        for t in std::iter::once(&s.truncation)
            .chain(s.n_sweep.iter())
            .chain(s.perturbation.iter())
            .chain(s.refinement.iter())
        {
            put(&format!("{}.csv", t.name), &t.to_csv())?;
        }
    }
    Ok(written)
}

/// Output directory: explicit override, then the config, then `out/<name>`.
pub fn output_dir(config: &ScenarioConfig, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf)
        .or_else(|| config.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Truncation,
    Steps,
    Perturbation,
}

/// One study table along `axis`, with defaults when the config declares
/// none.
pub fn sweep(config: &ScenarioConfig, axis: SweepAxis) -> Result<Table> {
    match axis {
        SweepAxis::Steps => {
            let steps = if config.studies.refinement.is_empty() {
                vec![16, 32, 64, 128]
            } else {
                config.studies.refinement.clone()
            };
            Ok(refinement_table(config, &steps))
        }
        SweepAxis::Truncation => {
            let p = prepare(config)?;
            let levels = if config.studies.n_sweep.is_empty() {
                vec![1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6]
            } else {
                config.studies.n_sweep.clone()
            };
            truncation_table(&p.tree, &p.coeffs, &levels, "n_sweep")
        }
        SweepAxis::Perturbation => {
            let p = prepare(config)?;
            let solved = solve_and_track(
                &p.tree,
                &p.coeffs,
                riccati::solve_minimal_limit(&p.tree, &p.coeffs)?,
            )?;
            let count = match config.studies.perturbation_count {
                0 => 50,
                k => k,
            };
            perturbation_table(config, &p.tree, &p.coeffs, &solved, count)
                .map_err(Error::InvalidInput)
        }
    }
}
