//! Batch front door: loads JSON experiment specs, runs named tasks and
//! writes machine-readable reports (one CSV per process plus a JSON
//! summary), deterministically: identical specs produce byte-identical
//! reports.
//!
//! Exit codes: 0 success, 2 validation failure, 3 solver error, 4 oracle
//! mismatch beyond tolerance. `RBSDE_LAB_THREADS` caps batch parallelism.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::bsde::{g_expectation_process, solve_bsde, AffineDriver, Driver, PerNode, ZeroDriver};
use crate::market::{build_market, ClaimJson, MarketJson, MarketSpec};
use crate::priors::{
    kappa_driver, scenario_driver, KappaDriver, MNorm, OptDirection, PriorFamily, ScenarioDriver,
};
use crate::rbsde::{
    k_increment_formula, optimal_stopping, solve_penalized, solve_rbsde, OracleOutcome,
};
use crate::tree::{AdaptedProcess, NodeId, ScenarioTree, StoppingTime, TreeSpec};

#[derive(Error, Debug)]
pub enum CliError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("solver error in experiment {name}: {message}")]
    Solver { name: String, message: String },
    #[error(
        "oracle mismatch in experiment {name}: {what} differs by {difference:e} (tolerance {tolerance:e})"
    )]
    OracleMismatch {
        name: String,
        what: String,
        difference: f64,
        tolerance: f64,
    },
}

impl CliError {
    /// CI-friendly exit code: 2 validation, 3 solver/io, 4 oracle mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation(_) => 2,
            CliError::Io { .. } | CliError::Solver { .. } => 3,
            CliError::OracleMismatch { .. } => 4,
        }
    }
}

/// Whether oracle cross-checks run during `solve`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    On,
    Off,
    Auto,
}

impl std::str::FromStr for OracleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "on" => Ok(OracleMode::On),
            "off" => Ok(OracleMode::Off),
            "auto" => Ok(OracleMode::Auto),
            other => Err(format!("oracle mode {other:?}, expected on|off|auto")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub tolerance: f64,
    pub oracle: OracleMode,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: 1e-9,
            oracle: OracleMode::Auto,
        }
    }
}

// ---------------------------------------------------------------------------
// On-disk experiment format
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SolveBsde,
    SolveRbsde,
    Penalization,
    RobustExpectation,
    PriceEuropean,
    PriceAmerican,
    AmbiguityStoppingDemo,
}

impl TaskKind {
    fn as_str(self) -> &'static str {
        match self {
            TaskKind::SolveBsde => "solve_bsde",
            TaskKind::SolveRbsde => "solve_rbsde",
            TaskKind::Penalization => "penalization",
            TaskKind::RobustExpectation => "robust_expectation",
            TaskKind::PriceEuropean => "price_european",
            TaskKind::PriceAmerican => "price_american",
            TaskKind::AmbiguityStoppingDemo => "ambiguity_stopping_demo",
        }
    }
}

/// Named drivers, as written in spec files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverJson {
    Zero,
    Affine {
        alpha: crate::market::ParamJson,
        beta: crate::market::ParamJson,
        gamma: Vec<f64>,
    },
    KappaIgnorance {
        kappa: crate::market::ParamJson,
        norm: String,
    },
    Scenario {
        kappa: f64,
        scenarios: Vec<Vec<f64>>,
    },
    /// Reserved for callers embedding the library.
    Custom,
}

/// Terminal / obstacle values: a constant, per-node values by label, or
/// an explicit "no obstacle" marker.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValuesJson {
    Constant { value: f64 },
    ById { values: BTreeMap<String, f64> },
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorJson {
    Kappa {
        kappa: crate::market::ParamJson,
        norm: String,
    },
    Scenario {
        kappa: f64,
        scenarios: Vec<Vec<f64>>,
    },
    Explicit {
        thetas: BTreeMap<String, Vec<Vec<f64>>>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DemoJson {
    pub mu: f64,
    pub sigma: Vec<f64>,
    pub s0: f64,
    pub prior: PriorJson,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentJson {
    pub name: String,
    pub task: TaskKind,
    pub tree: TreeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<ValuesJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<ValuesJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<OptDirection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo: Option<DemoJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ExperimentFileJson {
    Batch { experiments: Vec<ExperimentJson> },
    Single(ExperimentJson),
}

// ---------------------------------------------------------------------------
// Loading and validation
// ---------------------------------------------------------------------------

/// A fully validated experiment, ready to run.
pub struct LoadedExperiment {
    pub name: String,
    pub task: TaskKind,
    pub tree: ScenarioTree,
    driver: Option<LoadedDriver>,
    terminal: Option<AdaptedProcess>,
    obstacle: Option<AdaptedProcess>,
    prior: Option<PriorFamily>,
    mode: OptDirection,
    n_max: u64,
    market_spec: Option<MarketSpec>,
    claim: Option<ClaimJson>,
    demo: Option<LoadedDemo>,
    pub out: Option<String>,
}

enum LoadedDriver {
    Zero,
    Affine(AffineDriver),
    Kappa(KappaDriver),
    Scenario(ScenarioDriver),
}

impl LoadedDriver {
    fn as_dyn(&self) -> &dyn Driver {
        match self {
            LoadedDriver::Zero => &ZeroDriver,
            LoadedDriver::Affine(d) => d,
            LoadedDriver::Kappa(d) => d,
            LoadedDriver::Scenario(d) => d,
        }
    }
}

struct LoadedDemo {
    mu: f64,
    sigma: DVector<f64>,
    s0: f64,
    prior: PriorFamily,
}

fn parse_norm(s: &str, errors: &mut Vec<String>, at: &str) -> MNorm {
    match s {
        "M" => MNorm::M,
        "Mplus" => MNorm::Mplus,
        other => {
            errors.push(format!("{at}: norm {other:?}, expected \"M\" or \"Mplus\""));
            MNorm::M
        }
    }
}

fn resolve_values(
    tree: &ScenarioTree,
    values: &ValuesJson,
    leaves_only: bool,
    at: &str,
    errors: &mut Vec<String>,
) -> Option<AdaptedProcess> {
    match values {
        ValuesJson::None => None,
        ValuesJson::Constant { value } => Some(AdaptedProcess::constant(tree, *value)),
        ValuesJson::ById { values } => {
            let mut p = AdaptedProcess::zeros(tree);
            for node in tree.ids() {
                let label = &tree.node(node).label;
                match values.get(label) {
                    Some(v) => p.set(node, *v),
                    None if leaves_only && !tree.is_terminal(node) => {}
                    None => errors.push(format!("{at}: no value for node {label}")),
                }
            }
            Some(p)
        }
    }
}

fn resolve_prior(
    tree: &ScenarioTree,
    prior: &PriorJson,
    at: &str,
    errors: &mut Vec<String>,
) -> Option<PriorFamily> {
    let family = match prior {
        PriorJson::Kappa { kappa, norm } => {
            let norm = parse_norm(norm, errors, at);
            match kappa.resolve(tree, &format!("{at}: kappa")) {
                Ok(kappa) => PriorFamily::KappaIgnorance { kappa, norm },
                Err(e) => {
                    errors.push(format!("{at}: {e}"));
                    return None;
                }
            }
        }
        PriorJson::Scenario { kappa, scenarios } => PriorFamily::Scenario {
            kappa: *kappa,
            scenarios: scenarios
                .iter()
                .map(|v| DVector::from_vec(v.clone()))
                .collect(),
        },
        PriorJson::Explicit { thetas } => {
            let mut options: Vec<Vec<DVector<f64>>> = vec![Vec::new(); tree.node_count()];
            let mut missing = Vec::new();
            for node in tree.non_terminal() {
                let label = &tree.node(node).label;
                match thetas.get(label) {
                    Some(opts) => {
                        options[node.index()] =
                            opts.iter().map(|v| DVector::from_vec(v.clone())).collect()
                    }
                    None => missing.push(label.clone()),
                }
            }
            if !missing.is_empty() {
                errors.push(format!(
                    "{at}: no theta options for node(s) {}",
                    missing.join(", ")
                ));
                return None;
            }
            PriorFamily::Explicit { options }
        }
    };
    if let Err(e) = family.validate(tree) {
        errors.push(format!("{at}: {e}"));
        return None;
    }
    Some(family)
}

fn load_experiment(exp: &ExperimentJson, errors: &mut Vec<String>) -> Option<LoadedExperiment> {
    let name = exp.name.clone();
    let at = |what: &str| format!("experiment {name}: {what}");
    let tree = match ScenarioTree::from_spec(&exp.tree) {
        Ok(t) => t,
        Err(e) => {
            errors.push(at(&format!("tree: {e}")));
            return None;
        }
    };

    let driver = match &exp.driver {
        None => None,
        Some(DriverJson::Zero) => Some(LoadedDriver::Zero),
        Some(DriverJson::Custom) => {
            errors.push(at("driver kind \"custom\" is reserved for library embedding"));
            None
        }
        Some(DriverJson::Affine { alpha, beta, gamma }) => {
            let alpha = alpha.resolve(&tree, "alpha");
            let beta = beta.resolve(&tree, "beta");
            match (alpha, beta) {
                (Ok(alpha), Ok(beta)) => {
                    match AffineDriver::new(
                        &tree,
                        alpha,
                        beta,
                        PerNode::Constant(DVector::from_vec(gamma.clone())),
                    ) {
                        Ok(d) => Some(LoadedDriver::Affine(d)),
                        Err(e) => {
                            errors.push(at(&format!("driver: {e}")));
                            None
                        }
                    }
                }
                (a, b) => {
                    for r in [a.err(), b.err()].into_iter().flatten() {
                        errors.push(at(&format!("driver: {r}")));
                    }
                    None
                }
            }
        }
        Some(DriverJson::KappaIgnorance { kappa, norm }) => {
            let norm = parse_norm(norm, errors, &at("driver"));
            match kappa
                .resolve(&tree, "kappa")
                .map_err(|e| e.to_string())
                .and_then(|k| kappa_driver(&tree, k, norm).map_err(|e| e.to_string()))
            {
                Ok(d) => Some(LoadedDriver::Kappa(d)),
                Err(e) => {
                    errors.push(at(&format!("driver: {e}")));
                    None
                }
            }
        }
        Some(DriverJson::Scenario { kappa, scenarios }) => {
            let scenarios = scenarios
                .iter()
                .map(|v| DVector::from_vec(v.clone()))
                .collect();
            match scenario_driver(&tree, *kappa, scenarios) {
                Ok(d) => Some(LoadedDriver::Scenario(d)),
                Err(e) => {
                    errors.push(at(&format!("driver: {e}")));
                    None
                }
            }
        }
    };

    let terminal = exp
        .terminal
        .as_ref()
        .and_then(|v| resolve_values(&tree, v, true, &at("terminal"), errors));
    let obstacle = exp
        .obstacle
        .as_ref()
        .and_then(|v| resolve_values(&tree, v, false, &at("obstacle"), errors));
    let prior = exp
        .prior
        .as_ref()
        .and_then(|p| resolve_prior(&tree, p, &at("prior"), errors));

    // task-specific requirements
    match exp.task {
        TaskKind::SolveBsde => {
            if exp.driver.is_none() {
                errors.push(at("solve_bsde needs a driver"));
            }
            if exp.terminal.is_none() {
                errors.push(at("solve_bsde needs terminal values"));
            }
        }
        TaskKind::SolveRbsde | TaskKind::Penalization => {
            if exp.driver.is_none() {
                errors.push(at("this task needs a driver"));
            }
            if exp.terminal.is_none() {
                errors.push(at("this task needs terminal values"));
            }
            if exp.obstacle.is_none() {
                errors.push(at(
                    "this task needs an obstacle (use {\"kind\": \"none\"} for unconstrained)",
                ));
            }
            if exp.task == TaskKind::Penalization && obstacle.is_none() {
                errors.push(at("penalization needs a real obstacle"));
            }
            if let (Some(t), Some(s)) = (&terminal, &obstacle) {
                for leaf in tree.leaves() {
                    if s.get(leaf) > t.get(leaf) + 1e-12 {
                        errors.push(at(&format!(
                            "standard data violated at leaf {}: obstacle {} exceeds terminal {}",
                            tree.node(leaf).label,
                            s.get(leaf),
                            t.get(leaf)
                        )));
                    }
                }
            }
        }
        TaskKind::RobustExpectation => {
            if exp.prior.is_none() {
                errors.push(at("robust_expectation needs a prior family"));
            }
            if exp.terminal.is_none() {
                errors.push(at("robust_expectation needs terminal values"));
            }
        }
        TaskKind::PriceEuropean | TaskKind::PriceAmerican => {
            if exp.market.is_none() {
                errors.push(at("pricing tasks need a market"));
            }
        }
        TaskKind::AmbiguityStoppingDemo => {
            if exp.demo.is_none() {
                errors.push(at("the demo needs a demo block (mu, sigma, s0, prior)"));
            }
        }
    }

    let market_spec = match &exp.market {
        None => None,
        Some(mj) => match mj.resolve_spec(&tree) {
            Ok(spec) => Some(spec),
            Err(e) => {
                errors.push(at(&format!("market: {e}")));
                None
            }
        },
    };
    let claim = exp.market.as_ref().and_then(|m| m.claim.clone());
    if matches!(exp.task, TaskKind::PriceEuropean | TaskKind::PriceAmerican)
        && exp.market.is_some()
        && claim.is_none()
    {
        errors.push(at("pricing tasks need a claim in the market block"));
    }

    let demo = match &exp.demo {
        None => None,
        Some(d) => {
            let mut ok = true;
            if d.sigma.len() != tree.state_count() {
                errors.push(at(&format!(
                    "demo sigma has {} components, expected {}",
                    d.sigma.len(),
                    tree.state_count()
                )));
                ok = false;
            }
            if d.s0 <= 0.0 {
                errors.push(at("demo s0 must be positive"));
                ok = false;
            }
            let prior = resolve_prior(&tree, &d.prior, &at("demo prior"), errors);
            if matches!(d.prior, PriorJson::Explicit { .. }) {
                errors.push(at("demo prior must be kappa or scenario (drives a BSDE)"));
                ok = false;
            }
            match (ok, prior) {
                (true, Some(prior)) => Some(LoadedDemo {
                    mu: d.mu,
                    sigma: DVector::from_vec(d.sigma.clone()),
                    s0: d.s0,
                    prior,
                }),
                _ => None,
            }
        }
    };

    if !errors.is_empty() {
        return None;
    }
    Some(LoadedExperiment {
        name,
        task: exp.task,
        tree,
        driver,
        terminal,
        obstacle,
        prior,
        mode: exp.mode.unwrap_or(OptDirection::Inf),
        n_max: exp.n_max.unwrap_or(1 << 14),
        market_spec,
        claim,
        demo,
        out: exp.out.clone(),
    })
}

/// Parses and validates a spec file, returning every violation at once.
pub fn load_spec(path: &Path) -> Result<Vec<LoadedExperiment>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    load_spec_str(&text, &path.display().to_string())
}

/// Parses and validates a spec from a JSON string.
pub fn load_spec_str(text: &str, origin: &str) -> Result<Vec<LoadedExperiment>, CliError> {
    let parsed: ExperimentFileJson =
        serde_json::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
    let experiments = match parsed {
        ExperimentFileJson::Batch { experiments } => experiments,
        ExperimentFileJson::Single(e) => vec![e],
    };
    if experiments.is_empty() {
        return Err(CliError::Validation(vec!["no experiments in file".into()]));
    }
    let mut errors = Vec::new();
    let mut loaded = Vec::new();
    let mut seen = Vec::new();
    for exp in &experiments {
        if seen.contains(&exp.name) {
            errors.push(format!("duplicate experiment name {}", exp.name));
        }
        seen.push(exp.name.clone());
        if let Some(l) = load_experiment(exp, &mut errors) {
            loaded.push(l);
        }
    }
    if errors.is_empty() {
        Ok(loaded)
    } else {
        Err(CliError::Validation(errors))
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One experiment's deterministic output: file names with contents, plus the
/// summary value.
pub struct Report {
    pub name: String,
    /// `(file name, content)`, in fixed order.
    pub files: Vec<(String, String)>,
    pub summary: serde_json::Value,
}

/// Rounds to 12 significant digits; all report numbers pass through here.
pub fn sig12(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap()
}

fn fmt12(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{x:.11e}")
}

fn node_rows(tree: &ScenarioTree) -> Vec<NodeId> {
    let mut ids: Vec<NodeId> = tree.ids().collect();
    ids.sort_by_key(|&n| (tree.node(n).time, n.index()));
    ids
}

fn csv_scalar(tree: &ScenarioTree, header: &str, value: impl Fn(NodeId) -> f64) -> String {
    let mut out = format!("node,time,{header}\n");
    for n in node_rows(tree) {
        out.push_str(&format!(
            "{},{},{}\n",
            tree.node(n).label,
            tree.node(n).time,
            fmt12(value(n))
        ));
    }
    out
}

fn csv_z(tree: &ScenarioTree, z: &[Option<crate::tree::QVector>]) -> String {
    let m = tree.state_count();
    let mut out = String::from("node,time");
    for j in 1..=m {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    for n in node_rows(tree) {
        out.push_str(&format!("{},{}", tree.node(n).label, tree.node(n).time));
        match &z[n.index()] {
            Some(q) => {
                for j in 0..m {
                    out.push_str(&format!(",{}", fmt12(q[j])));
                }
            }
            None => {
                for _ in 0..m {
                    out.push(',');
                }
            }
        }
        out.push('\n');
    }
    out
}

fn csv_k(tree: &ScenarioTree, k: &AdaptedProcess, dk: &[Option<f64>]) -> String {
    let mut out = String::from("node,time,k,dk\n");
    for n in node_rows(tree) {
        let dk_str = dk[n.index()].map(fmt12).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            tree.node(n).label,
            tree.node(n).time,
            fmt12(k.get(n)),
            dk_str
        ));
    }
    out
}

fn rule_summary(tree: &ScenarioTree, rule: &StoppingTime) -> serde_json::Value {
    let mut per_leaf = Vec::new();
    let mut min_t = usize::MAX;
    let mut max_t = 0usize;
    for leaf in tree.leaves() {
        let stop = rule.stop_node_on_path(tree, leaf);
        let t = tree.node(stop).time;
        min_t = min_t.min(t);
        max_t = max_t.max(t);
        per_leaf.push(json!({
            "leaf": tree.node(leaf).label,
            "stop_node": tree.node(stop).label,
            "stop_time": t,
        }));
    }
    json!({
        "min_stop_time": min_t,
        "max_stop_time": max_t,
        "uniform": min_t == max_t,
        "per_path": per_leaf,
    })
}

fn oracle_allowed(mode: OracleMode) -> bool {
    !matches!(mode, OracleMode::Off)
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

fn solver_err<E: std::fmt::Display>(name: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Solver {
        name: name.to_string(),
        message: e.to_string(),
    }
}

/// Runs one experiment and assembles its report. Oracle mismatches beyond
/// `opts.tolerance` are errors (exit code 4).
pub fn run_experiment(exp: &LoadedExperiment, opts: &SolveOptions) -> Result<Report, CliError> {
    let tree = &exp.tree;
    let name = &exp.name;
    match exp.task {
        TaskKind::SolveBsde => {
            let driver = exp.driver.as_ref().unwrap().as_dyn();
            let terminal = exp.terminal.as_ref().unwrap();
            let sol = solve_bsde(tree, terminal, &driver).map_err(solver_err(name))?;
            let residual = sol.max_identity_residual(tree, &driver);
            if residual > opts.tolerance {
                return Err(CliError::Solver {
                    name: name.clone(),
                    message: format!("one-step identity residual {residual:e}"),
                });
            }
            Ok(Report {
                name: name.clone(),
                files: vec![
                    ("y.csv".into(), csv_scalar(tree, "y", |n| sol.y.get(n))),
                    ("z.csv".into(), csv_z(tree, &sol.z)),
                ],
                summary: json!({
                    "task": exp.task.as_str(),
                    "name": name,
                    "y0": sig12(sol.y.get(tree.root())),
                    "identity_residual": sig12(residual),
                }),
            })
        }
        TaskKind::SolveRbsde => {
            let driver = exp.driver.as_ref().unwrap().as_dyn();
            let terminal = exp.terminal.as_ref().unwrap();
            let obstacle = exp.obstacle.as_ref();
            let sol =
                solve_rbsde(tree, terminal, &driver, obstacle).map_err(solver_err(name))?;
            let violations = sol.violations(tree, &driver, obstacle);
            if violations.max() > opts.tolerance {
                return Err(CliError::Solver {
                    name: name.clone(),
                    message: format!("solution invariants violated by {:e}", violations.max()),
                });
            }
            let mut k_disc = 0.0_f64;
            let mut stopping = json!(null);
            if oracle_allowed(opts.oracle) {
                for node in tree.ids() {
                    k_disc = k_disc.max(k_increment_formula(
                        tree, &sol, terminal, &driver, obstacle, node,
                    ));
                }
                if k_disc > opts.tolerance {
                    return Err(CliError::OracleMismatch {
                        name: name.clone(),
                        what: "pathwise K sup-formula".into(),
                        difference: k_disc,
                        tolerance: opts.tolerance,
                    });
                }
                let os =
                    optimal_stopping(tree, &sol, terminal, &driver, obstacle, tree.root(), 20);
                let oracle_json = match os.oracle {
                    OracleOutcome::Value(v) => {
                        let diff = (v - os.value).abs();
                        if diff > opts.tolerance {
                            return Err(CliError::OracleMismatch {
                                name: name.clone(),
                                what: "stopping-time enumeration".into(),
                                difference: diff,
                                tolerance: opts.tolerance,
                            });
                        }
                        json!({"value": sig12(v), "difference": sig12(diff)})
                    }
                    OracleOutcome::Skipped { decision_nodes } => {
                        json!({"skipped": true, "decision_nodes": decision_nodes})
                    }
                };
                stopping = json!({
                    "value": sig12(os.value),
                    "rule_value": sig12(os.rule_value),
                    "oracle": oracle_json,
                    "rule": rule_summary(tree, &os.rule),
                });
            }
            Ok(Report {
                name: name.clone(),
                files: vec![
                    ("y.csv".into(), csv_scalar(tree, "y", |n| sol.y.get(n))),
                    ("z.csv".into(), csv_z(tree, &sol.z)),
                    ("k.csv".into(), csv_k(tree, &sol.k, &sol.dk)),
                ],
                summary: json!({
                    "task": exp.task.as_str(),
                    "name": name,
                    "y0": sig12(sol.y.get(tree.root())),
                    "max_violation": sig12(violations.max()),
                    "k_formula_discrepancy": sig12(k_disc),
                    "stopping": stopping,
                }),
            })
        }
        TaskKind::Penalization => {
            let driver = exp.driver.as_ref().unwrap().as_dyn();
            let terminal = exp.terminal.as_ref().unwrap();
            let obstacle = exp.obstacle.as_ref().unwrap();
            let report = solve_penalized(tree, terminal, &driver, obstacle, exp.n_max)
                .map_err(solver_err(name))?;
            let runs: Vec<serde_json::Value> = report
                .runs
                .iter()
                .map(|r| {
                    json!({
                        "n": r.n,
                        "y0": sig12(r.solution.y.get(tree.root())),
                        "sup_distance": sig12(r.sup_distance),
                    })
                })
                .collect();
            let last = report.runs.last().unwrap();
            Ok(Report {
                name: name.clone(),
                files: vec![
                    (
                        "y.csv".into(),
                        csv_scalar(tree, "y", |n| report.rbsde.y.get(n)),
                    ),
                    (
                        "y_penalized.csv".into(),
                        csv_scalar(tree, "y_penalized", |n| last.solution.y.get(n)),
                    ),
                    (
                        "k.csv".into(),
                        csv_k(tree, &report.rbsde.k, &report.rbsde.dk),
                    ),
                ],
                summary: json!({
                    "task": exp.task.as_str(),
                    "name": name,
                    "y0": sig12(report.rbsde.y.get(tree.root())),
                    "n_max": last.n,
                    "final_sup_distance": sig12(last.sup_distance),
                    "runs": runs,
                }),
            })
        }
        TaskKind::RobustExpectation => {
            let terminal = exp.terminal.as_ref().unwrap();
            let family = exp.prior.as_ref().unwrap();
            let oracle = crate::priors::robust_expectation_oracle(
                tree,
                terminal,
                family,
                tree.root(),
                exp.mode,
            )
            .map_err(solver_err(name))?;
            // BSDE route for the two driver-backed families
            let bsde_value = match family {
                PriorFamily::KappaIgnorance { kappa, norm } => {
                    if exp.mode == OptDirection::Inf {
                        let d = kappa_driver(tree, kappa.clone(), *norm)
                            .map_err(solver_err(name))?;
                        Some(
                            g_expectation_process(tree, terminal, &d)
                                .map_err(solver_err(name))?
                                .y
                                .get(tree.root()),
                        )
                    } else {
                        None
                    }
                }
                PriorFamily::Scenario { kappa, scenarios } => {
                    if exp.mode == OptDirection::Inf {
                        let d = scenario_driver(tree, *kappa, scenarios.clone())
                            .map_err(solver_err(name))?;
                        Some(
                            g_expectation_process(tree, terminal, &d)
                                .map_err(solver_err(name))?
                                .y
                                .get(tree.root()),
                        )
                    } else {
                        None
                    }
                }
                PriorFamily::Explicit { .. } => None,
            };
            if let Some(b) = bsde_value {
                if oracle_allowed(opts.oracle) {
                    let diff = (b - oracle.value).abs();
                    if diff > opts.tolerance + oracle.gap {
                        return Err(CliError::OracleMismatch {
                            name: name.clone(),
                            what: "robust expectation vs BSDE".into(),
                            difference: diff,
                            tolerance: opts.tolerance + oracle.gap,
                        });
                    }
                }
            }
            Ok(Report {
                name: name.clone(),
                files: vec![(
                    "terminal.csv".into(),
                    csv_scalar(tree, "xi", |n| terminal.get(n)),
                )],
                summary: json!({
                    "task": exp.task.as_str(),
                    "name": name,
                    "mode": exp.mode,
                    "value": sig12(oracle.value),
                    "gap": sig12(oracle.gap),
                    "bsde_value": bsde_value.map(sig12),
                }),
            })
        }
        TaskKind::PriceEuropean | TaskKind::PriceAmerican => run_pricing(exp, opts),
        TaskKind::AmbiguityStoppingDemo => run_demo(exp, opts),
    }
}

fn run_pricing(exp: &LoadedExperiment, opts: &SolveOptions) -> Result<Report, CliError> {
    let tree = &exp.tree;
    let name = &exp.name;
    let market =
        build_market(tree, exp.market_spec.clone().unwrap()).map_err(solver_err(name))?;
    let (american, payoff) = exp
        .claim
        .as_ref()
        .unwrap()
        .resolve(&market)
        .map_err(|e| CliError::Validation(vec![format!("experiment {name}: claim: {e}")]))?;
    if american != matches!(exp.task, TaskKind::PriceAmerican) {
        return Err(CliError::Validation(vec![format!(
            "experiment {name}: claim type does not match task {}",
            exp.task.as_str()
        )]));
    }
    let assets_csv = {
        let mut out = String::from("node,time,bond");
        for a in 1..=market.asset_count() {
            out.push_str(&format!(",s{a}"));
        }
        out.push('\n');
        for n in node_rows(tree) {
            out.push_str(&format!(
                "{},{},{}",
                tree.node(n).label,
                tree.node(n).time,
                fmt12(market.bond.get(n))
            ));
            for p in &market.prices {
                out.push_str(&format!(",{}", fmt12(p.get(n))));
            }
            out.push('\n');
        }
        out
    };

    if !american {
        let leaves = payoff.process(&market);
        let bounds =
            crate::market::price_european_bounds(&market, &leaves).map_err(solver_err(name))?;
        let mut oracle_json = json!(null);
        if oracle_allowed(opts.oracle) {
            let lo = crate::market::european_bounds_oracle(&market, &leaves, OptDirection::Inf)
                .map_err(solver_err(name))?;
            let hi = crate::market::european_bounds_oracle(&market, &leaves, OptDirection::Sup)
                .map_err(solver_err(name))?;
            let diff = lo
                .sup_distance(&bounds.sub.y)
                .max(hi.sup_distance(&bounds.super_.y));
            if diff > opts.tolerance {
                return Err(CliError::OracleMismatch {
                    name: name.clone(),
                    what: "vertex-measure pricing recursion".into(),
                    difference: diff,
                    tolerance: opts.tolerance,
                });
            }
            oracle_json = json!({
                "sub0": sig12(lo.get(tree.root())),
                "super0": sig12(hi.get(tree.root())),
                "difference": sig12(diff),
            });
        }
        Ok(Report {
            name: name.clone(),
            files: vec![
                (
                    "sub_y.csv".into(),
                    csv_scalar(tree, "y", |n| bounds.sub.y.get(n)),
                ),
                (
                    "super_y.csv".into(),
                    csv_scalar(tree, "y", |n| bounds.super_.y.get(n)),
                ),
                ("sub_z.csv".into(), csv_z(tree, &bounds.sub.z)),
                ("super_z.csv".into(), csv_z(tree, &bounds.super_.z)),
                ("assets.csv".into(), assets_csv),
            ],
            summary: json!({
                "task": exp.task.as_str(),
                "name": name,
                "sub0": sig12(bounds.sub.y.get(tree.root())),
                "super0": sig12(bounds.super_.y.get(tree.root())),
                "martingale_residual": sig12(market.martingale_residual),
                "oracle": oracle_json,
            }),
        })
    } else {
        let process = payoff.process(&market);
        let bounds =
            crate::market::price_american_bounds(&market, &process).map_err(solver_err(name))?;
        let complete = tree
            .non_terminal()
            .all(|n| market.polytope(n).map(|p| p.is_singleton()).unwrap_or(false));
        let mut crr_json = json!(null);
        if oracle_allowed(opts.oracle) && complete {
            let crr = crate::market::crr_oracle(&market, &payoff, true);
            if let Ok(crr) = crr {
                let diff = (bounds.sub.y.get(tree.root()) - crr)
                    .abs()
                    .max((bounds.super_.y.get(tree.root()) - crr).abs());
                if diff > opts.tolerance {
                    return Err(CliError::OracleMismatch {
                        name: name.clone(),
                        what: "classical binomial recursion".into(),
                        difference: diff,
                        tolerance: opts.tolerance,
                    });
                }
                crr_json = json!({"price": sig12(crr), "difference": sig12(diff)});
            }
        }
        // self-financing consistency where the hedge is identified
        let residuals = crate::market::super_strategy_residuals(&market, &bounds.super_);
        let identified = residuals.iter().filter(|(_, r)| r.is_some()).count();
        let worst_residual = residuals
            .iter()
            .filter_map(|(_, r)| *r)
            .fold(0.0_f64, f64::max);
        if oracle_allowed(opts.oracle) && worst_residual > opts.tolerance {
            return Err(CliError::OracleMismatch {
                name: name.clone(),
                what: "self-financing super-strategy identity".into(),
                difference: worst_residual,
                tolerance: opts.tolerance,
            });
        }
        Ok(Report {
            name: name.clone(),
            files: vec![
                (
                    "sub_y.csv".into(),
                    csv_scalar(tree, "y", |n| bounds.sub.y.get(n)),
                ),
                (
                    "super_y.csv".into(),
                    csv_scalar(tree, "y", |n| bounds.super_.y.get(n)),
                ),
                ("sub_z.csv".into(), csv_z(tree, &bounds.sub.z)),
                ("super_z.csv".into(), csv_z(tree, &bounds.super_.z)),
                (
                    "sub_k.csv".into(),
                    csv_k(tree, &bounds.sub.k, &bounds.sub.dk),
                ),
                (
                    "super_k.csv".into(),
                    csv_k(tree, &bounds.super_.k, &bounds.super_.dk),
                ),
                ("payoff.csv".into(), csv_scalar(tree, "payoff", |n| process.get(n))),
                ("assets.csv".into(), assets_csv),
            ],
            summary: json!({
                "task": exp.task.as_str(),
                "name": name,
                "sub0": sig12(bounds.sub.y.get(tree.root())),
                "super0": sig12(bounds.super_.y.get(tree.root())),
                "complete": complete,
                "crr": crr_json,
                "martingale_residual": sig12(market.martingale_residual),
                "exercise": rule_summary(tree, &bounds.exercise),
                "hedge": {
                    "identified_nodes": identified,
                    "total_nodes": residuals.len(),
                    "max_residual": sig12(worst_residual),
                },
            }),
        })
    }
}

fn run_demo(exp: &LoadedExperiment, _opts: &SolveOptions) -> Result<Report, CliError> {
    let tree = &exp.tree;
    let name = &exp.name;
    let demo = exp.demo.as_ref().unwrap();

    // asset values: S_{t+1} - S_t = mu S_t + sigma* S_t M_{t+1}
    let mut asset = AdaptedProcess::zeros(tree);
    asset.set(tree.root(), demo.s0);
    let mut order: Vec<NodeId> = tree.ids().collect();
    order.sort_by_key(|&n| (tree.node(n).time, n.index()));
    for node in order {
        if tree.is_terminal(node) {
            continue;
        }
        for (k, c) in tree.node(node).children.iter().enumerate() {
            let m = tree.m_increment(node, k).map_err(solver_err(name))?;
            let factor = 1.0 + demo.mu + demo.sigma.dot(&m);
            let price = asset.get(node) * factor;
            if price <= 0.0 {
                return Err(CliError::Solver {
                    name: name.clone(),
                    message: format!(
                        "asset value becomes nonpositive at node {}",
                        tree.node(c.node).label
                    ),
                });
            }
            asset.set(c.node, price);
        }
    }

    // no ambiguity: Snell envelope under the reference law
    let plain = solve_rbsde(tree, &asset, &ZeroDriver, Some(&asset)).map_err(solver_err(name))?;
    let plain_rule =
        optimal_stopping(tree, &plain, &asset, &ZeroDriver, Some(&asset), tree.root(), 0).rule;

    // ambiguity: worst-case drift from the prior family's driver
    let (robust, robust_rule, worst_drift) = match &demo.prior {
        PriorFamily::KappaIgnorance { kappa, norm } => {
            let d = kappa_driver(tree, kappa.clone(), *norm).map_err(solver_err(name))?;
            let sol = solve_rbsde(tree, &asset, &d, Some(&asset)).map_err(solver_err(name))?;
            let rule =
                optimal_stopping(tree, &sol, &asset, &d, Some(&asset), tree.root(), 0).rule;
            // worst-case one-step drift at the root per unit of value
            let stats = tree.stats(tree.root()).map_err(solver_err(name))?;
            let norm_sigma = match norm {
                MNorm::M => stats.m_norm(&demo.sigma),
                MNorm::Mplus => stats.m_plus_norm(&demo.sigma),
            };
            let drift = demo.mu - *kappa.at(tree.root()) * norm_sigma;
            (sol, rule, drift)
        }
        PriorFamily::Scenario { kappa, scenarios } => {
            let d = scenario_driver(tree, *kappa, scenarios.clone()).map_err(solver_err(name))?;
            let sol = solve_rbsde(tree, &asset, &d, Some(&asset)).map_err(solver_err(name))?;
            let rule =
                optimal_stopping(tree, &sol, &asset, &d, Some(&asset), tree.root(), 0).rule;
            let stats = tree.stats(tree.root()).map_err(solver_err(name))?;
            let mut worst = 0.0_f64;
            for pi in scenarios {
                worst = worst.min(demo.sigma.dot(&(pi - &stats.p)));
            }
            (sol, rule, demo.mu + kappa * worst)
        }
        PriorFamily::Explicit { .. } => unreachable!("rejected at load"),
    };

    Ok(Report {
        name: name.clone(),
        files: vec![
            ("asset.csv".into(), csv_scalar(tree, "s", |n| asset.get(n))),
            (
                "value_no_ambiguity.csv".into(),
                csv_scalar(tree, "u", |n| plain.y.get(n)),
            ),
            (
                "value_ambiguity.csv".into(),
                csv_scalar(tree, "u", |n| robust.y.get(n)),
            ),
        ],
        summary: json!({
            "task": exp.task.as_str(),
            "name": name,
            "mu": sig12(demo.mu),
            "value_no_ambiguity": sig12(plain.y.get(tree.root())),
            "tau_no_ambiguity": rule_summary(tree, &plain_rule),
            "value_ambiguity": sig12(robust.y.get(tree.root())),
            "tau_ambiguity": rule_summary(tree, &robust_rule),
            "worst_case_drift": sig12(worst_drift),
        }),
    })
}

/// Writes a report's files under `dir` with the experiment name as prefix;
/// returns the paths written.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut written = Vec::new();
    for (file, content) in &report.files {
        let path = dir.join(format!("{}.{}", report.name, file));
        std::fs::write(&path, content).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    let path = dir.join(format!("{}.summary.json", report.name));
    let mut text = serde_json::to_string_pretty(&report.summary).expect("serializable summary");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    written.push(path);
    Ok(written)
}

/// Number of worker threads for a batch: `RBSDE_LAB_THREADS` when set,
/// otherwise the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("RBSDE_LAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Runs every experiment in a batch (concurrently up to [`thread_cap`]) and
/// returns the reports in file order. The first failing experiment in file
/// order determines the error.
pub fn run_batch(
    experiments: &[LoadedExperiment],
    opts: &SolveOptions,
) -> Result<Vec<Report>, CliError> {
    let threads = thread_cap().min(experiments.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<Report, CliError>>>> =
        experiments.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= experiments.len() {
                    break;
                }
                let result = run_experiment(&experiments[i], opts);
                *results[i].lock().unwrap() = Some(result);
            });
        }
    });
    let mut out = Vec::new();
    for cell in results {
        match cell.into_inner().unwrap().expect("worker ran") {
            Ok(report) => out.push(report),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// The `solve` subcommand: load, run, write reports. Returns the out-dir
/// used per experiment.
pub fn solve_file(
    spec_path: &Path,
    out_dir: Option<&Path>,
    opts: &SolveOptions,
) -> Result<Vec<PathBuf>, CliError> {
    let experiments = load_spec(spec_path)?;
    let reports = run_batch(&experiments, opts)?;
    let mut written = Vec::new();
    for (exp, report) in experiments.iter().zip(&reports) {
        let dir: PathBuf = match (&exp.out, out_dir) {
            (Some(dir), _) => PathBuf::from(dir),
            (None, Some(dir)) => dir.to_path_buf(),
            (None, None) => PathBuf::from("out"),
        };
        written.extend(write_report(report, &dir)?);
    }
    Ok(written)
}

/// The `validate` subcommand: load only.
pub fn validate_file(spec_path: &Path) -> Result<Vec<String>, CliError> {
    let experiments = load_spec(spec_path)?;
    Ok(experiments.iter().map(|e| e.name.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const PUT_SPEC: &str = r#"{
        "name": "put2",
        "task": "price_american",
        "tree": {"horizon": 2, "state_count": 2, "kernel": [[0.5, 0.5]]},
        "market": {
            "r": 0.0,
            "assets": [{"s0": 100.0, "b": 0.05, "sigma": [0.2, -0.2]}],
            "claim": {"type": "american", "payoff": "put", "strike": 100.0}
        }
    }"#;

    #[test]
    fn minimal_spec_loads() {
        let loaded = load_spec_str(PUT_SPEC, "inline").unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].task, TaskKind::PriceAmerican);
    }

    #[test]
    fn bad_kernel_sum_names_the_row() {
        let spec = r#"{
            "name": "bad",
            "task": "solve_bsde",
            "tree": {"horizon": 1, "state_count": 2, "kernel": [[0.5, 0.4]]},
            "driver": {"kind": "zero"},
            "terminal": {"kind": "constant", "value": 1.0}
        }"#;
        match load_spec_str(spec, "inline") {
            Err(CliError::Validation(errors)) => {
                assert!(errors.iter().any(|e| e.contains("kernel row 0")), "{errors:?}");
                assert!(errors.iter().any(|e| e.contains("0.9")), "{errors:?}");
            }
            Err(other) => panic!("expected validation failure, got {other}"),
            Ok(_) => panic!("expected validation failure"),
        }
    }

    #[test]
    fn obstacle_above_terminal_cites_standard_data() {
        let spec = r#"{
            "name": "bad",
            "task": "solve_rbsde",
            "tree": {"horizon": 1, "state_count": 2, "kernel": [[0.5, 0.5]]},
            "driver": {"kind": "zero"},
            "terminal": {"kind": "constant", "value": 0.0},
            "obstacle": {"kind": "constant", "value": 1.0}
        }"#;
        match load_spec_str(spec, "inline") {
            Err(CliError::Validation(errors)) => {
                assert!(
                    errors.iter().any(|e| e.contains("standard data")),
                    "{errors:?}"
                );
            }
            Err(other) => panic!("expected validation failure, got {other}"),
            Ok(_) => panic!("expected validation failure"),
        }
    }

    #[test]
    fn american_put_report_matches_classical_recursion() {
        let loaded = load_spec_str(PUT_SPEC, "inline").unwrap();
        let report = run_experiment(&loaded[0], &SolveOptions::default()).unwrap();
        let summary = &report.summary;
        assert_eq!(summary["sub0"], summary["crr"]["price"]);
        assert_eq!(summary["super0"], summary["crr"]["price"]);
        let crr = summary["crr"]["price"].as_f64().unwrap();
        assert!((crr - 10.83984375).abs() < 1e-10);
        assert_eq!(summary["complete"], json!(true));
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let loaded = load_spec_str(PUT_SPEC, "inline").unwrap();
        let a = run_experiment(&loaded[0], &SolveOptions::default()).unwrap();
        let b = run_experiment(&loaded[0], &SolveOptions::default()).unwrap();
        assert_eq!(a.files, b.files);
        assert_eq!(
            serde_json::to_string(&a.summary).unwrap(),
            serde_json::to_string(&b.summary).unwrap()
        );
    }

    #[test]
    fn demo_without_ambiguity_waits_for_the_horizon() {
        let spec = r#"{
            "name": "demo0",
            "task": "ambiguity_stopping_demo",
            "tree": {"horizon": 3, "state_count": 2, "kernel": [[0.5, 0.5]]},
            "demo": {
                "mu": 0.05,
                "sigma": [0.2, -0.2],
                "s0": 1.0,
                "prior": {"kind": "kappa", "kappa": 0.0, "norm": "M"}
            }
        }"#;
        let loaded = load_spec_str(spec, "inline").unwrap();
        let report = run_experiment(&loaded[0], &SolveOptions::default()).unwrap();
        let tau = &report.summary["tau_no_ambiguity"];
        assert_eq!(tau["uniform"], json!(true));
        assert_eq!(tau["min_stop_time"], json!(3));
        // kappa = 0: the robust rule coincides
        assert_eq!(report.summary["tau_ambiguity"]["min_stop_time"], json!(3));
    }

    #[test]
    fn demo_with_heavy_ambiguity_stops_immediately() {
        // worst-case drift mu - kappa ||sigma||_M = 0.05 - 0.5 * 0.2 < 0
        let spec = r#"{
            "name": "demo1",
            "task": "ambiguity_stopping_demo",
            "tree": {"horizon": 3, "state_count": 2, "kernel": [[0.5, 0.5]]},
            "demo": {
                "mu": 0.05,
                "sigma": [0.2, -0.2],
                "s0": 1.0,
                "prior": {"kind": "kappa", "kappa": 0.5, "norm": "M"}
            }
        }"#;
        let loaded = load_spec_str(spec, "inline").unwrap();
        let report = run_experiment(&loaded[0], &SolveOptions::default()).unwrap();
        assert!(report.summary["worst_case_drift"].as_f64().unwrap() < 0.0);
        let tau = &report.summary["tau_ambiguity"];
        assert_eq!(tau["uniform"], json!(true));
        assert_eq!(tau["max_stop_time"], json!(0));
        // the value collapses to the spot
        assert_eq!(report.summary["value_ambiguity"], json!(1.0));
        // without ambiguity the same tree still waits
        assert_eq!(
            report.summary["tau_no_ambiguity"]["min_stop_time"],
            json!(3)
        );
    }

    #[test]
    fn sig12_is_idempotent() {
        for x in [0.0, 1.0, -10.83984375, 1.0 / 3.0, 2.5e-13] {
            assert_eq!(sig12(x), sig12(sig12(x)));
        }
    }
}
