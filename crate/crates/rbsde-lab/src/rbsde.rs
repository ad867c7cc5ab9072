//! Reflected BSDEs: solutions constrained to stay above an obstacle process,
//! with the minimal increasing process `K` that enforces the constraint.
//!
//! The solver projects one step at a time: the unconstrained root is kept
//! when it dominates the obstacle, otherwise the value is pinned to the
//! obstacle and the gap goes into `K`. Cross-checks: penalization
//! approximation, the pathwise sup-formula for `K`, exhaustive optimal
//! stopping, and the minimax representation for inf/sup-of-affine drivers.

use thiserror::Error;

use crate::bsde::{
    backward_step, implicit_step, AffineDriver, BsdeError, BsdeSolution, Driver, IDENTITY_TOL,
};
use crate::tree::{
    conditional_expectation, AdaptedProcess, NodeId, QVector, ScenarioTree, StoppingTime,
    TreeError,
};
use nalgebra::DVector;

/// Tolerance used to detect `Y = S` (binding obstacle) nodes.
pub const BINDING_TOL: f64 = 1e-9;

#[derive(Error, Debug)]
pub enum RbsdeError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error("obstacle {obstacle} exceeds terminal value {terminal} at leaf {node}")]
    ObstacleAboveTerminal {
        node: String,
        obstacle: f64,
        terminal: f64,
    },
    #[error("penalized values decreased from n={n_prev} to n={n} at node {node}")]
    NonMonotone { node: String, n_prev: u64, n: u64 },
    #[error("family member {member} invalid: {reason}")]
    FamilyMemberInvalid { member: usize, reason: String },
    #[error("driver family is empty")]
    EmptyFamily,
}

/// Solution triple of a reflected BSDE. `K` increments are stored on the
/// parent node (predictable indexing): `dk[n]` is `K_{t+1} - K_t` on the
/// whole subtree step out of `n`, and `k` carries the accumulated process.
#[derive(Clone, Debug)]
pub struct RbsdeSolution {
    pub y: AdaptedProcess,
    pub z: Vec<Option<QVector>>,
    pub k: AdaptedProcess,
    pub dk: Vec<Option<f64>>,
}

impl RbsdeSolution {
    pub fn z_at(&self, node: NodeId) -> &QVector {
        self.z[node.index()].as_ref().expect("non-terminal node")
    }

    pub fn dk_at(&self, node: NodeId) -> f64 {
        self.dk[node.index()].expect("non-terminal node")
    }

    pub fn as_bsde(&self) -> BsdeSolution {
        BsdeSolution {
            y: self.y.clone(),
            z: self.z.clone(),
        }
    }

    /// Worst violation of each defining property of a solution.
    pub fn violations<D: Driver>(
        &self,
        tree: &ScenarioTree,
        driver: &D,
        obstacle: Option<&AdaptedProcess>,
    ) -> RbsdeViolations {
        let mut v = RbsdeViolations {
            k_start: self.k.get(tree.root()).abs(),
            ..Default::default()
        };
        for node in tree.non_terminal() {
            let y = self.y.get(node);
            let z = self.z_at(node);
            let dk = self.dk_at(node);
            let f = driver.eval(tree, node, y, z);
            for (kk, c) in tree.node(node).children.iter().enumerate() {
                if c.prob <= 0.0 {
                    continue;
                }
                let m = tree.m_increment(node, kk).unwrap();
                let res = y - self.y.get(c.node) - f - dk + z.dot(&m);
                v.identity = v.identity.max(res.abs());
                let k_step = self.k.get(c.node) - self.k.get(node) - dk;
                v.identity = v.identity.max(k_step.abs());
            }
            v.k_monotone = v.k_monotone.max(-dk);
            if let Some(s) = obstacle {
                v.complementarity = v.complementarity.max(((y - s.get(node)) * dk).abs());
            }
        }
        if let Some(s) = obstacle {
            for node in tree.ids() {
                v.domination = v.domination.max(s.get(node) - self.y.get(node));
            }
        }
        v
    }
}

/// Violation magnitudes; all vanish (up to tolerance) for a valid solution.
#[derive(Clone, Copy, Debug, Default)]
pub struct RbsdeViolations {
    /// One-step identity residual (includes consistency of `k` with `dk`).
    pub identity: f64,
    /// `max(S - Y)` over all nodes.
    pub domination: f64,
    /// `max(-dK)` over non-terminal nodes.
    pub k_monotone: f64,
    /// `max |(Y - S) dK|` over non-terminal nodes.
    pub complementarity: f64,
    /// `|K_0|`.
    pub k_start: f64,
}

impl RbsdeViolations {
    pub fn max(&self) -> f64 {
        self.identity
            .max(self.domination)
            .max(self.k_monotone)
            .max(self.complementarity)
            .max(self.k_start)
    }
}

fn check_standard_data(
    tree: &ScenarioTree,
    terminal: &AdaptedProcess,
    obstacle: Option<&AdaptedProcess>,
) -> Result<(), RbsdeError> {
    if let Some(s) = obstacle {
        for leaf in tree.leaves() {
            if s.get(leaf) > terminal.get(leaf) + 1e-12 {
                return Err(RbsdeError::ObstacleAboveTerminal {
                    node: tree.node(leaf).label.clone(),
                    obstacle: s.get(leaf),
                    terminal: terminal.get(leaf),
                });
            }
        }
    }
    Ok(())
}

/// Solves the reflected BSDE with lower obstacle `obstacle` (pass `None` for
/// the unconstrained equation). Per node: `Z` from the martingale
/// representation, the unconstrained root `y_hat` of
/// `y - f(t, y, Z) = E[Y_{t+1} | F_t]`, then `Y = max(S, y_hat)` with
/// `dK = S - f(t, S, Z) - E > 0` exactly when the obstacle binds.
pub fn solve_rbsde<D: Driver>(
    tree: &ScenarioTree,
    terminal: &AdaptedProcess,
    driver: &D,
    obstacle: Option<&AdaptedProcess>,
) -> Result<RbsdeSolution, RbsdeError> {
    check_standard_data(tree, terminal, obstacle)?;
    let mut y = AdaptedProcess::zeros(tree);
    for leaf in tree.leaves() {
        y.set(leaf, terminal.get(leaf));
    }
    let mut z: Vec<Option<QVector>> = vec![None; tree.node_count()];
    let mut dk: Vec<Option<f64>> = vec![None; tree.node_count()];
    for node in tree.backward_order() {
        let (y_hat, zt, e) = backward_step(tree, node, driver, &y)?;
        let (yt, dkt) = match obstacle {
            Some(s) if y_hat < s.get(node) => {
                let st = s.get(node);
                (st, st - driver.eval(tree, node, st, &zt) - e)
            }
            _ => (y_hat, 0.0),
        };
        y.set(node, yt);
        z[node.index()] = Some(zt);
        dk[node.index()] = Some(dkt);
    }
    // accumulate K along paths, K_0 = 0
    let mut k = AdaptedProcess::zeros(tree);
    let mut order: Vec<NodeId> = tree.ids().collect();
    order.sort_by_key(|&n| (tree.node(n).time, n.index()));
    for node in order {
        if let Some(d) = dk[node.index()] {
            let base = k.get(node);
            for c in &tree.node(node).children {
                k.set(c.node, base + d);
            }
        }
    }
    Ok(RbsdeSolution { y, z, k, dk })
}

/// Penalized driver `f_n(t, y, z) = f(t, y, z) + n (y - S_t)^-`.
pub struct PenalizedDriver<'a, D: Driver> {
    pub base: &'a D,
    pub n: f64,
    pub obstacle: &'a AdaptedProcess,
}

impl<D: Driver> Driver for PenalizedDriver<'_, D> {
    fn eval(&self, tree: &ScenarioTree, node: NodeId, y: f64, z: &DVector<f64>) -> f64 {
        let s = self.obstacle.get(node);
        self.base.eval(tree, node, y, z) + self.n * (s - y).max(0.0)
    }

    fn solve_implicit(
        &self,
        tree: &ScenarioTree,
        node: NodeId,
        z: &DVector<f64>,
        target: f64,
    ) -> Option<f64> {
        // exact two-branch solve when the base is affine in y
        let beta = self.base.beta(tree, node)?;
        let f0 = self.base.eval(tree, node, 0.0, z);
        let s = self.obstacle.get(node);
        let unconstrained = (target + f0) / (1.0 - beta);
        if unconstrained >= s {
            Some(unconstrained)
        } else {
            Some((target + f0 + self.n * s) / (1.0 - beta + self.n))
        }
    }
}

/// One penalized solve.
#[derive(Clone, Debug)]
pub struct PenalizedRun {
    pub n: u64,
    pub solution: BsdeSolution,
    /// `sup_node |Y^n - Y|` against the reflected solution.
    pub sup_distance: f64,
    /// Reconstructed increments `n (Y^n - S)^-` per non-terminal node.
    pub dk: Vec<Option<f64>>,
}

/// Result of the penalization sweep `n = 1, 2, 4, ..., n_max`.
#[derive(Clone, Debug)]
pub struct PenalizationReport {
    pub runs: Vec<PenalizedRun>,
    pub rbsde: RbsdeSolution,
}

/// Solves the sequence of penalized BSDEs and checks the approximation
/// against the reflected solution. Fails with [`RbsdeError::NonMonotone`]
/// when `Y^n` is not nondecreasing in `n`, which signals a driver violating
/// the comparison hypotheses.
pub fn solve_penalized<D: Driver>(
    tree: &ScenarioTree,
    terminal: &AdaptedProcess,
    driver: &D,
    obstacle: &AdaptedProcess,
    n_max: u64,
) -> Result<PenalizationReport, RbsdeError> {
    let rbsde = solve_rbsde(tree, terminal, driver, Some(obstacle))?;
    let mut runs: Vec<PenalizedRun> = Vec::new();
    let mut n = 1u64;
    loop {
        let pd = PenalizedDriver {
            base: driver,
            n: n as f64,
            obstacle,
        };
        let solution = crate::bsde::solve_bsde(tree, terminal, &pd)?;
        if let Some(prev) = runs.last() {
            for node in tree.ids() {
                if solution.y.get(node) < prev.solution.y.get(node) - IDENTITY_TOL {
                    return Err(RbsdeError::NonMonotone {
                        node: tree.node(node).label.clone(),
                        n_prev: prev.n,
                        n,
                    });
                }
            }
        }
        let sup_distance = solution.y.sup_distance(&rbsde.y);
        let dk = tree
            .ids()
            .map(|node| {
                (!tree.is_terminal(node))
                    .then(|| n as f64 * (obstacle.get(node) - solution.y.get(node)).max(0.0))
            })
            .collect();
        runs.push(PenalizedRun {
            n,
            solution,
            sup_distance,
            dk,
        });
        if n >= n_max {
            break;
        }
        n = (n * 2).min(n_max.max(1));
    }
    Ok(PenalizationReport { runs, rbsde })
}

/// Evaluates the pathwise sup-formula for the remaining reflection mass,
/// `K_T - K_t = sup_{t<=u<=T} (xi + sum_{u<=s<T} f - sum Z*M - S_u)^-`,
/// on every path through `node` and returns the largest discrepancy against
/// the solution's `K`. Without an obstacle the formula value is zero.
pub fn k_increment_formula<D: Driver>(
    tree: &ScenarioTree,
    sol: &RbsdeSolution,
    terminal: &AdaptedProcess,
    driver: &D,
    obstacle: Option<&AdaptedProcess>,
    node: NodeId,
) -> f64 {
    let mut worst = 0.0_f64;
    for leaf in tree.subtree(node) {
        if !tree.is_terminal(leaf) {
            continue;
        }
        let path: Vec<NodeId> = tree
            .path_to(leaf)
            .into_iter()
            .skip_while(|&n| n != node)
            .collect();
        // running sum of f - Z*M backward from the leaf
        let mut tail = vec![0.0_f64; path.len()];
        for u in (0..path.len().saturating_sub(1)).rev() {
            let n = path[u];
            let z = sol.z_at(n);
            let f = driver.eval(tree, n, sol.y.get(n), z);
            let next = path[u + 1];
            let kk = tree
                .node(n)
                .children
                .iter()
                .position(|c| c.node == next)
                .expect("edge on path");
            let m = tree.m_increment(n, kk).unwrap();
            tail[u] = tail[u + 1] + f - z.dot(&m);
        }
        let formula = match obstacle {
            None => 0.0,
            Some(s) => path
                .iter()
                .enumerate()
                .map(|(u, &n)| -(terminal.get(leaf) + tail[u] - s.get(n)))
                .fold(0.0_f64, f64::max),
        };
        let actual = sol.k.get(leaf) - sol.k.get(node);
        worst = worst.max((formula - actual).abs());
    }
    worst
}

/// Outcome of the exhaustive stopping-time oracle.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleOutcome {
    Value(f64),
    /// Enumeration skipped: the subtree has too many decision nodes.
    Skipped { decision_nodes: usize },
}

/// Value, optimal rule, and brute-force cross-check of the optimal stopping
/// problem solved by a reflected BSDE.
#[derive(Clone, Debug)]
pub struct OptimalStopping {
    /// `Y` at the node: the value of the stopping problem.
    pub value: f64,
    /// First-hitting rule of `{Y = S}` (stops at the horizon if never hit).
    pub rule: StoppingTime,
    /// The rule's objective value; equals `value` for a valid solution.
    pub rule_value: f64,
    /// Max over all stopping rules of the objective, by exhaustive
    /// enumeration when the subtree is small enough.
    pub oracle: OracleOutcome,
}

fn stop_value(
    tree: &ScenarioTree,
    terminal: &AdaptedProcess,
    obstacle: Option<&AdaptedProcess>,
    n: NodeId,
) -> f64 {
    if tree.is_terminal(n) {
        terminal.get(n)
    } else {
        obstacle.expect("early stop requires an obstacle").get(n)
    }
}

/// Objective `E[sum_{t<=s<theta} f(s, Y_s, Z_s) + S_theta 1_{theta<T}
/// + xi 1_{theta=T} | node]` of a stopping rule, evaluated along the solved
/// `(Y, Z)`.
pub fn stopping_objective<D: Driver>(
    tree: &ScenarioTree,
    sol: &RbsdeSolution,
    terminal: &AdaptedProcess,
    driver: &D,
    obstacle: Option<&AdaptedProcess>,
    rule: &StoppingTime,
    node: NodeId,
) -> f64 {
    if rule.stops_at(node) {
        return stop_value(tree, terminal, obstacle, node);
    }
    let f = driver.eval(tree, node, sol.y.get(node), sol.z_at(node));
    let cont: f64 = tree
        .node(node)
        .children
        .iter()
        .map(|c| c.prob * stopping_objective(tree, sol, terminal, driver, obstacle, rule, c.node))
        .sum();
    f + cont
}

/// Extracts the optimal stopping rule from a solved RBSDE and cross-checks
/// the value against exhaustive enumeration over all stopping rules on the
/// subtree (skipped above `max_decision_nodes`).
pub fn optimal_stopping<D: Driver>(
    tree: &ScenarioTree,
    sol: &RbsdeSolution,
    terminal: &AdaptedProcess,
    driver: &D,
    obstacle: Option<&AdaptedProcess>,
    node: NodeId,
    max_decision_nodes: usize,
) -> OptimalStopping {
    // first hitting of {Y = S}
    let mut rule = StoppingTime::at_horizon(tree);
    if let Some(s) = obstacle {
        for n in tree.subtree(node) {
            if !tree.is_terminal(n) && sol.y.get(n) - s.get(n) <= BINDING_TOL {
                rule.set_stop(n, true);
            }
        }
    }
    let value = sol.y.get(node);
    let rule_value = stopping_objective(tree, sol, terminal, driver, obstacle, &rule, node);

    let decision_nodes = tree
        .subtree(node)
        .iter()
        .filter(|&&n| !tree.is_terminal(n))
        .count();
    let oracle = if decision_nodes > max_decision_nodes {
        OracleOutcome::Skipped { decision_nodes }
    } else if obstacle.is_none() {
        // stopping early is meaningless without an obstacle; the only
        // admissible rule is the horizon rule
        OracleOutcome::Value(stopping_objective(
            tree,
            sol,
            terminal,
            driver,
            obstacle,
            &StoppingTime::at_horizon(tree),
            node,
        ))
    } else {
        // all rule values on the subtree, built bottom-up: a rule stops here
        // or continues with any combination of child rules
        fn values<D: Driver>(
            tree: &ScenarioTree,
            sol: &RbsdeSolution,
            terminal: &AdaptedProcess,
            driver: &D,
            obstacle: Option<&AdaptedProcess>,
            n: NodeId,
        ) -> Vec<f64> {
            if tree.is_terminal(n) {
                return vec![terminal.get(n)];
            }
            let mut out = vec![stop_value(tree, terminal, obstacle, n)];
            let f = driver.eval(tree, n, sol.y.get(n), sol.z_at(n));
            let mut continues = vec![f];
            for c in &tree.node(n).children {
                let child = values(tree, sol, terminal, driver, obstacle, c.node);
                let mut next = Vec::with_capacity(continues.len() * child.len());
                for &base in &continues {
                    for &v in &child {
                        next.push(base + c.prob * v);
                    }
                }
                continues = next;
            }
            out.extend(continues);
            out
        }
        let all = values(tree, sol, terminal, driver, obstacle, node);
        OracleOutcome::Value(all.into_iter().fold(f64::NEG_INFINITY, f64::max))
    };

    OptimalStopping {
        value,
        rule,
        rule_value,
        oracle,
    }
}

/// Direction of the optimization over a driver family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptMode {
    Inf,
    Sup,
}

impl OptMode {
    fn fold_init(self) -> f64 {
        match self {
            OptMode::Inf => f64::INFINITY,
            OptMode::Sup => f64::NEG_INFINITY,
        }
    }

    fn pick(self, a: f64, b: f64) -> f64 {
        match self {
            OptMode::Inf => a.min(b),
            OptMode::Sup => a.max(b),
        }
    }
}

/// Driver given as the pointwise inf or sup of finitely many affine drivers.
/// The implicit step is exact: the root of `y - opt_j f_j(y, z) = target` is
/// the opt over the member roots.
pub struct FamilyDriver<'a> {
    pub members: &'a [AffineDriver],
    pub mode: OptMode,
}

impl FamilyDriver<'_> {
    fn member_root(&self, node: NodeId, j: usize, z: &DVector<f64>, target: f64) -> f64 {
        let m = &self.members[j];
        (target + m.alpha_at(node) + m.gamma_at(node).dot(z)) / (1.0 - m.beta_at(node))
    }

    /// Optimizing member index for the one-step root at a node (smallest
    /// index wins ties).
    pub fn argopt(&self, node: NodeId, z: &DVector<f64>, target: f64) -> usize {
        let mut best = 0;
        let mut best_root = self.member_root(node, 0, z, target);
        for j in 1..self.members.len() {
            let r = self.member_root(node, j, z, target);
            let better = match self.mode {
                OptMode::Inf => r < best_root,
                OptMode::Sup => r > best_root,
            };
            if better {
                best = j;
                best_root = r;
            }
        }
        best
    }
}

impl Driver for FamilyDriver<'_> {
    fn eval(&self, tree: &ScenarioTree, node: NodeId, y: f64, z: &DVector<f64>) -> f64 {
        self.members
            .iter()
            .map(|m| m.eval(tree, node, y, z))
            .fold(self.mode.fold_init(), |a, b| self.mode.pick(a, b))
    }

    fn solve_implicit(
        &self,
        _tree: &ScenarioTree,
        node: NodeId,
        z: &DVector<f64>,
        target: f64,
    ) -> Option<f64> {
        Some(
            (0..self.members.len())
                .map(|j| self.member_root(node, j, z, target))
                .fold(self.mode.fold_init(), |a, b| self.mode.pick(a, b)),
        )
    }

    fn is_normalised(&self) -> bool {
        self.members.iter().all(|m| m.is_normalised())
    }
}

/// Driver that picks a (possibly different) family member at every node.
struct SelectionDriver<'a> {
    members: &'a [AffineDriver],
    choice: &'a [usize],
}

impl Driver for SelectionDriver<'_> {
    fn eval(&self, tree: &ScenarioTree, node: NodeId, y: f64, z: &DVector<f64>) -> f64 {
        self.members[self.choice[node.index()]].eval(tree, node, y, z)
    }
    fn beta(&self, tree: &ScenarioTree, node: NodeId) -> Option<f64> {
        self.members[self.choice[node.index()]].beta(tree, node)
    }
}

/// Result of the minimax representation for an inf/sup-of-affine driver.
#[derive(Debug)]
pub struct MinimaxReport {
    /// Solution with the family driver.
    pub solution: RbsdeSolution,
    /// One reflected solve per member (constant selections).
    pub member_solutions: Vec<RbsdeSolution>,
    /// Optimizing member per non-terminal node along the family solution.
    pub argopt: Vec<Option<usize>>,
    /// Worst violation of `Y <= member Y` (inf mode; flipped for sup).
    pub envelope_margin: f64,
    /// Max error in the per-node exchange identity
    /// `opt_j (S v root_j) = S v opt_j root_j`.
    pub exchange_max_err: f64,
    /// Re-solving with the recorded optimal selection reproduces `Y`.
    pub argopt_max_err: f64,
    /// Pointwise distance between `Y` and the opt over all enumerated
    /// per-node member selections (`None` when enumeration was too large).
    pub selection_oracle_err: Option<f64>,
}

/// Cap on the number of member selections enumerated by the minimax oracle.
pub const SELECTION_ENUM_CAP: usize = 200_000;

/// Solves the RBSDE whose driver is the inf (resp. sup) over a finite family
/// of affine drivers, solves every member, records per-node optimizers and
/// cross-checks the minimax representation: the family value is the opt over
/// adapted member selections, attained by the recorded argopt selection.
pub fn minimax_bounds(
    tree: &ScenarioTree,
    terminal: &AdaptedProcess,
    members: &[AffineDriver],
    obstacle: Option<&AdaptedProcess>,
    mode: OptMode,
) -> Result<MinimaxReport, RbsdeError> {
    if members.is_empty() {
        return Err(RbsdeError::EmptyFamily);
    }
    for (j, m) in members.iter().enumerate() {
        for node in tree.non_terminal() {
            if m.beta_at(node).abs() >= 1.0 {
                return Err(RbsdeError::FamilyMemberInvalid {
                    member: j,
                    reason: format!(
                        "|beta| = {} >= 1 at node {}",
                        m.beta_at(node).abs(),
                        tree.node(node).label
                    ),
                });
            }
        }
        if !m.gamma_comparison_admissible(tree) {
            return Err(RbsdeError::FamilyMemberInvalid {
                member: j,
                reason: "gamma violates the comparison condition (p + gamma not in [0,1])"
                    .to_string(),
            });
        }
    }

    let family = FamilyDriver { members, mode };
    let solution = solve_rbsde(tree, terminal, &family, obstacle)?;
    let member_solutions: Vec<RbsdeSolution> = members
        .iter()
        .map(|m| solve_rbsde(tree, terminal, m, obstacle))
        .collect::<Result<_, _>>()?;

    // per-node optimizers and the exchange identity along the family solution
    let mut argopt: Vec<Option<usize>> = vec![None; tree.node_count()];
    let mut exchange_max_err = 0.0_f64;
    for node in tree.non_terminal() {
        let e = conditional_expectation(tree, &solution.y, node)?;
        let z = solution.z_at(node);
        argopt[node.index()] = Some(family.argopt(node, z, e));
        if let Some(s) = obstacle {
            let st = s.get(node);
            let roots: Vec<f64> = (0..members.len())
                .map(|j| family.member_root(node, j, z, e))
                .collect();
            let opt_of_max = roots
                .iter()
                .map(|&r| r.max(st))
                .fold(mode.fold_init(), |a, b| mode.pick(a, b));
            let max_of_opt = roots
                .iter()
                .fold(mode.fold_init(), |a, &b| mode.pick(a, b))
                .max(st);
            exchange_max_err = exchange_max_err.max((opt_of_max - max_of_opt).abs());
        }
    }

    // the family value is enveloped by every constant-member solution
    let mut envelope_margin = 0.0_f64;
    for ms in &member_solutions {
        for n in tree.ids() {
            let gap = match mode {
                OptMode::Inf => solution.y.get(n) - ms.y.get(n),
                OptMode::Sup => ms.y.get(n) - solution.y.get(n),
            };
            envelope_margin = envelope_margin.max(gap);
        }
    }

    // the recorded optimal selection reproduces the family solution
    let choice: Vec<usize> = argopt.iter().map(|o| o.unwrap_or(0)).collect();
    let sel = SelectionDriver {
        members,
        choice: &choice,
    };
    let argopt_sol = solve_rbsde(tree, terminal, &sel, obstacle)?;
    let argopt_max_err = argopt_sol.y.sup_distance(&solution.y);

    // brute-force enumeration over all per-node member selections
    let decision: Vec<NodeId> = tree.non_terminal().collect();
    let total = members.len().checked_pow(decision.len() as u32);
    let selection_oracle_err = match total {
        Some(total) if total <= SELECTION_ENUM_CAP => {
            let mut best: Vec<f64> = vec![mode.fold_init(); tree.node_count()];
            let mut choice = vec![0usize; tree.node_count()];
            for code in 0..total {
                let mut c = code;
                for &n in &decision {
                    choice[n.index()] = c % members.len();
                    c /= members.len();
                }
                let sel = SelectionDriver {
                    members,
                    choice: &choice,
                };
                let sol = solve_rbsde(tree, terminal, &sel, obstacle)?;
                for n in tree.ids() {
                    best[n.index()] = mode.pick(best[n.index()], sol.y.get(n));
                }
            }
            Some(
                tree.ids()
                    .map(|n| (best[n.index()] - solution.y.get(n)).abs())
                    .fold(0.0_f64, f64::max),
            )
        }
        _ => None,
    };

    Ok(MinimaxReport {
        solution,
        member_solutions,
        argopt,
        envelope_margin,
        exchange_max_err,
        argopt_max_err,
        selection_oracle_err,
    })
}

/// Checks the Snell minimality at a single node: lowering `Y` there by `eps`
/// breaks domination or one-step supermartingality.
pub fn snell_perturbation_breaks<D: Driver>(
    tree: &ScenarioTree,
    sol: &RbsdeSolution,
    driver: &D,
    obstacle: &AdaptedProcess,
    node: NodeId,
    eps: f64,
) -> Result<bool, RbsdeError> {
    let perturbed = sol.y.get(node) - eps;
    if perturbed < obstacle.get(node) - 1e-15 {
        return Ok(true);
    }
    if tree.is_terminal(node) {
        // terminal values are pinned to the data; any change breaks identity
        return Ok(true);
    }
    let (y_hat, _, _) = backward_step(tree, node, driver, &sol.y)?;
    Ok(perturbed < y_hat - 1e-15)
}

#[allow(dead_code)]
pub(crate) fn one_step_root<D: Driver>(
    tree: &ScenarioTree,
    node: NodeId,
    driver: &D,
    z: &DVector<f64>,
    target: f64,
) -> Result<f64, BsdeError> {
    implicit_step(tree, node, driver, z, target)
}
