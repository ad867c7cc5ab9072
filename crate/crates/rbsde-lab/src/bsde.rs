//! Backward stochastic difference equation solvers.
//!
//! A BSDE is the terminal-value problem
//! `Y_t = xi + sum f(u, Y_u, Z_u) - sum Z_u* M_{u+1}` solved backward in time
//! for the pair `(Y, Z)`. Per node the solve is: `Z` from the martingale
//! representation of the centered one-step values, then the unique root of
//! `y - f(t, y, Z) = E[Y_{t+1} | F_t]` (closed form for drivers that declare
//! affine-in-`y` structure, bracketing bisection otherwise).
//!
//! On top of the solver this module provides g-expectations (nonlinear
//! conditional expectations from normalised drivers), the driver induced by a
//! black-box conditional operator, Doob–Meyer decompositions of
//! g-super/submartingales, and a comparison-theorem hypothesis checker.

use nalgebra::DVector;
use thiserror::Error;

use crate::tree::{
    conditional_expectation, represent_martingale, AdaptedProcess, NodeId, QVector, ScenarioTree,
    TreeError,
};

/// Width at which the bisection fallback stops.
pub const BISECTION_TOL: f64 = 1e-12;
/// Residual tolerance for the one-step identity of a solution.
pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Error, Debug)]
pub enum BsdeError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("root not bracketed at node {node}: y - f(y, z) never changes sign")]
    RootNotBracketed { node: String },
    #[error("driver is not normalised")]
    NotNormalised,
    #[error("driver violates equivalence invariance at node {node} (|df| = {diff})")]
    DriverEquivalenceViolation { node: String, diff: f64 },
}

/// Per-node map `(y, z) -> f(t, y, z)` aggregated backward in time, together
/// with the structural capabilities the solver can exploit.
///
/// Contract: `y -> y - f(t, y, z)` must be strictly increasing and continuous
/// for every fixed `(t, z)`, and `f` must not separate `z`'s that pair
/// identically with the martingale increments at the node.
pub trait Driver {
    fn eval(&self, tree: &ScenarioTree, node: NodeId, y: f64, z: &DVector<f64>) -> f64;

    /// `Some(beta)` when `f(t, y, z) = f(t, 0, z) + beta * y` with `|beta| < 1`
    /// at this node; enables the closed-form implicit step.
    fn beta(&self, _tree: &ScenarioTree, _node: NodeId) -> Option<f64> {
        None
    }

    /// Exact solution of `y - f(t, y, z) = target` when the driver knows one;
    /// checked before the generic paths.
    fn solve_implicit(
        &self,
        _tree: &ScenarioTree,
        _node: NodeId,
        _z: &DVector<f64>,
        _target: f64,
    ) -> Option<f64> {
        None
    }

    fn depends_on_y(&self) -> bool {
        true
    }

    fn depends_on_z(&self) -> bool {
        true
    }

    /// `f(t, y, 0) = 0` for all `y`; required for g-expectations.
    fn is_normalised(&self) -> bool {
        false
    }

    /// Declared invariance under the pairing equivalence; auditable with
    /// [`audit_equivalence`].
    fn respects_equivalence(&self) -> bool {
        true
    }
}

impl<D: Driver + ?Sized> Driver for &D {
    fn eval(&self, tree: &ScenarioTree, node: NodeId, y: f64, z: &DVector<f64>) -> f64 {
        (**self).eval(tree, node, y, z)
    }
    fn beta(&self, tree: &ScenarioTree, node: NodeId) -> Option<f64> {
        (**self).beta(tree, node)
    }
    fn solve_implicit(
        &self,
        tree: &ScenarioTree,
        node: NodeId,
        z: &DVector<f64>,
        target: f64,
    ) -> Option<f64> {
        (**self).solve_implicit(tree, node, z, target)
    }
    fn depends_on_y(&self) -> bool {
        (**self).depends_on_y()
    }
    fn depends_on_z(&self) -> bool {
        (**self).depends_on_z()
    }
    fn is_normalised(&self) -> bool {
        (**self).is_normalised()
    }
    fn respects_equivalence(&self) -> bool {
        (**self).respects_equivalence()
    }
}

/// Per-node parameter: one shared value or one value per node index.
#[derive(Clone, Debug)]
pub enum PerNode<T> {
    Constant(T),
    ByNode(Vec<T>),
}

impl<T> PerNode<T> {
    pub fn at(&self, node: NodeId) -> &T {
        match self {
            PerNode::Constant(v) => v,
            PerNode::ByNode(vs) => &vs[node.index()],
        }
    }
}

/// The driverless case: plain conditional expectation.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn eval(&self, _: &ScenarioTree, _: NodeId, _: f64, _: &DVector<f64>) -> f64 {
        0.0
    }
    fn beta(&self, _: &ScenarioTree, _: NodeId) -> Option<f64> {
        Some(0.0)
    }
    fn depends_on_y(&self) -> bool {
        false
    }
    fn depends_on_z(&self) -> bool {
        false
    }
    fn is_normalised(&self) -> bool {
        true
    }
}

/// Affine driver `f(t, y, z) = alpha_t + beta_t y + <gamma_t, z>` with
/// `beta_t < 1` and `gamma_t` a Q-vector process.
#[derive(Clone, Debug)]
pub struct AffineDriver {
    alpha: PerNode<f64>,
    beta: PerNode<f64>,
    gamma: PerNode<DVector<f64>>,
    normalised: bool,
}

impl AffineDriver {
    pub fn new(
        tree: &ScenarioTree,
        alpha: PerNode<f64>,
        beta: PerNode<f64>,
        gamma: PerNode<DVector<f64>>,
    ) -> Result<Self, BsdeError> {
        let mut normalised = true;
        for node in tree.non_terminal() {
            let b = *beta.at(node);
            if b >= 1.0 {
                return Err(BsdeError::Tree(TreeError::BadSpec(format!(
                    "beta = {b} at node {} makes y - f(y, z) non-increasing",
                    tree.node(node).label
                ))));
            }
            let g = gamma.at(node);
            if g.len() != tree.state_count() {
                return Err(BsdeError::Tree(TreeError::BadSpec(format!(
                    "gamma at node {} has {} components, expected {}",
                    tree.node(node).label,
                    g.len(),
                    tree.state_count()
                ))));
            }
            let stats = tree.stats(node)?;
            if g.iter().sum::<f64>().abs() > 1e-9 {
                return Err(BsdeError::Tree(TreeError::BadSpec(format!(
                    "gamma at node {} does not sum to zero",
                    tree.node(node).label
                ))));
            }
            for i in 0..g.len() {
                if !stats.support.contains(&i) && g[i].abs() > 1e-12 {
                    return Err(BsdeError::Tree(TreeError::BadSpec(format!(
                        "gamma at node {} is nonzero off the support",
                        tree.node(node).label
                    ))));
                }
            }
            if *alpha.at(node) != 0.0 || b != 0.0 {
                normalised = false;
            }
        }
        Ok(AffineDriver {
            alpha,
            beta,
            gamma,
            normalised,
        })
    }

    pub fn constant(
        tree: &ScenarioTree,
        alpha: f64,
        beta: f64,
        gamma: DVector<f64>,
    ) -> Result<Self, BsdeError> {
        Self::new(
            tree,
            PerNode::Constant(alpha),
            PerNode::Constant(beta),
            PerNode::Constant(gamma),
        )
    }

    pub fn alpha_at(&self, node: NodeId) -> f64 {
        *self.alpha.at(node)
    }

    pub fn beta_at(&self, node: NodeId) -> f64 {
        *self.beta.at(node)
    }

    pub fn gamma_at(&self, node: NodeId) -> &DVector<f64> {
        self.gamma.at(node)
    }

    /// Whether `gamma` satisfies the comparison condition at every node:
    /// `p + gamma` componentwise in `[0, 1]`, i.e. `gamma` is the drift of an
    /// admissible measure change.
    pub fn gamma_comparison_admissible(&self, tree: &ScenarioTree) -> bool {
        tree.non_terminal().all(|node| {
            let stats = match tree.stats(node) {
                Ok(s) => s,
                Err(_) => return false,
            };
            let g = self.gamma.at(node);
            stats
                .support
                .iter()
                .all(|&i| stats.p[i] + g[i] >= -1e-12 && stats.p[i] + g[i] <= 1.0 + 1e-12)
        })
    }
}

impl Driver for AffineDriver {
    fn eval(&self, _: &ScenarioTree, node: NodeId, y: f64, z: &DVector<f64>) -> f64 {
        self.alpha.at(node) + self.beta.at(node) * y + self.gamma.at(node).dot(z)
    }
    fn beta(&self, _: &ScenarioTree, node: NodeId) -> Option<f64> {
        let b = *self.beta.at(node);
        (b.abs() < 1.0).then_some(b)
    }
    fn is_normalised(&self) -> bool {
        self.normalised
    }
}

/// Solution of a BSDE: `Y` on every node and the canonical `Z` on every
/// non-terminal node.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub y: AdaptedProcess,
    pub z: Vec<Option<QVector>>,
}

impl BsdeSolution {
    pub fn z_at(&self, node: NodeId) -> &QVector {
        self.z[node.index()].as_ref().expect("non-terminal node")
    }

    /// Largest one-step identity residual
    /// `|Y_t - Y_{t+1} - f(t, Y_t, Z_t) + Z_t* M_{t+1}|` over support edges.
    pub fn max_identity_residual<D: Driver>(&self, tree: &ScenarioTree, driver: &D) -> f64 {
        let mut worst = 0.0_f64;
        for node in tree.non_terminal() {
            let z = self.z_at(node);
            let f = driver.eval(tree, node, self.y.get(node), z);
            for (k, c) in tree.node(node).children.iter().enumerate() {
                if c.prob <= 0.0 {
                    continue;
                }
                let m = tree.m_increment(node, k).unwrap();
                let res = self.y.get(node) - self.y.get(c.node) - f + z.dot(&m);
                worst = worst.max(res.abs());
            }
        }
        worst
    }
}

/// Solves `y - f(t, y, z) = target` for `y` at one node.
pub(crate) fn implicit_step<D: Driver>(
    tree: &ScenarioTree,
    node: NodeId,
    driver: &D,
    z: &DVector<f64>,
    target: f64,
) -> Result<f64, BsdeError> {
    if let Some(y) = driver.solve_implicit(tree, node, z, target) {
        return Ok(y);
    }
    if let Some(beta) = driver.beta(tree, node) {
        return Ok((target + driver.eval(tree, node, 0.0, z)) / (1.0 - beta));
    }
    // bracketing bisection, bracket expanded geometrically from the target
    let phi = |y: f64| y - driver.eval(tree, node, y, z) - target;
    let mut half_width = 1.0_f64;
    let (mut lo, mut hi) = (target - half_width, target + half_width);
    let mut tries = 0;
    while !(phi(lo) <= 0.0 && phi(hi) >= 0.0) {
        tries += 1;
        if tries > 200 {
            return Err(BsdeError::RootNotBracketed {
                node: tree.node(node).label.clone(),
            });
        }
        half_width *= 2.0;
        lo = target - half_width;
        hi = target + half_width;
    }
    let mut iter = 0;
    while hi - lo > BISECTION_TOL && iter < 400 {
        iter += 1;
        let mid = 0.5 * (lo + hi);
        if phi(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One backward step at a node: martingale representation of the children of
/// `next` followed by the implicit scalar solve. Returns `(Y_t, Z_t, E)`.
pub(crate) fn backward_step<D: Driver>(
    tree: &ScenarioTree,
    node: NodeId,
    driver: &D,
    next: &AdaptedProcess,
) -> Result<(f64, QVector, f64), BsdeError> {
    let e = conditional_expectation(tree, next, node)?;
    let h: Vec<f64> = tree
        .node(node)
        .children
        .iter()
        .map(|c| next.get(c.node) - e)
        .collect();
    let z = represent_martingale(tree, node, &h)?;
    let y = implicit_step(tree, node, driver, &z, e)?;
    Ok((y, z, e))
}

/// Solves the BSDE with terminal condition `terminal` (read on the leaves)
/// and the given driver, by backward induction through the tree.
pub fn solve_bsde<D: Driver>(
    tree: &ScenarioTree,
    terminal: &AdaptedProcess,
    driver: &D,
) -> Result<BsdeSolution, BsdeError> {
    let mut y = AdaptedProcess::zeros(tree);
    for leaf in tree.leaves() {
        y.set(leaf, terminal.get(leaf));
    }
    let mut z: Vec<Option<QVector>> = vec![None; tree.node_count()];
    for node in tree.backward_order() {
        let (yt, zt, _) = backward_step(tree, node, driver, &y)?;
        y.set(node, yt);
        z[node.index()] = Some(zt);
    }
    Ok(BsdeSolution { y, z })
}

/// g-expectation `G(xi | F_t)` at `node` for a normalised driver: the BSDE
/// value at the node. Fails with [`BsdeError::NotNormalised`] otherwise.
pub fn g_expectation<D: Driver>(
    tree: &ScenarioTree,
    xi: &AdaptedProcess,
    driver: &D,
    node: NodeId,
) -> Result<f64, BsdeError> {
    Ok(g_expectation_process(tree, xi, driver)?.y.get(node))
}

/// Full conditional g-expectation process of a terminal payoff.
pub fn g_expectation_process<D: Driver>(
    tree: &ScenarioTree,
    xi: &AdaptedProcess,
    driver: &D,
) -> Result<BsdeSolution, BsdeError> {
    if !driver.is_normalised() {
        return Err(BsdeError::NotNormalised);
    }
    solve_bsde(tree, xi, driver)
}

/// A black-box one-step conditional operator `G(. | F_t)`, evaluated on
/// per-child values at a node.
pub trait OneStepOperator {
    fn conditional(&self, tree: &ScenarioTree, node: NodeId, child_values: &[f64]) -> f64;
}

/// The driver induced by a filtration-consistent, translation-invariant
/// operator: `f(t, z) = G(z* M_{t+1} | F_t)`, evaluated by applying `G` to
/// the one-step payoff of `z` against each possible increment.
pub fn induced_driver<G: OneStepOperator>(
    tree: &ScenarioTree,
    g_op: &G,
    node: NodeId,
    z: &DVector<f64>,
) -> Result<f64, BsdeError> {
    let n = tree.node(node);
    if n.children.is_empty() {
        return Err(BsdeError::Tree(TreeError::TerminalNode {
            node: n.label.clone(),
        }));
    }
    let mut payoffs = Vec::with_capacity(n.children.len());
    for (k, _) in n.children.iter().enumerate() {
        let m = tree.m_increment(node, k)?;
        payoffs.push(z.dot(&m));
    }
    Ok(g_op.conditional(tree, node, &payoffs))
}

/// One-step g-expectation of per-child values under a driver.
pub(crate) fn g_one_step<D: Driver>(
    tree: &ScenarioTree,
    node: NodeId,
    driver: &D,
    child_values: &[f64],
) -> Result<f64, BsdeError> {
    let children = &tree.node(node).children;
    let e: f64 = children
        .iter()
        .zip(child_values)
        .map(|(c, &v)| c.prob * v)
        .sum();
    let h: Vec<f64> = child_values.iter().map(|&v| v - e).collect();
    let z = represent_martingale(tree, node, &h)?;
    implicit_step(tree, node, driver, &z, e)
}

/// Monotonicity pattern of the compensator increments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MonotoneDirection {
    /// All increments nonnegative (a constant compensator counts here).
    Increasing,
    Decreasing,
    Neither,
}

/// Doob–Meyer decomposition of an adapted process under a normalised driver.
#[derive(Clone, Debug)]
pub struct DoobMeyer {
    /// Cumulative compensator per node, `K_0 = 0`; the increment over the
    /// step out of a node is stored on that node (predictable indexing).
    pub k: AdaptedProcess,
    /// Increment `K_{t+1} - K_t` per non-terminal node.
    pub increments: Vec<Option<f64>>,
    pub direction: MonotoneDirection,
}

/// Computes the unique predictable compensator `K` with `K_0 = 0` such that
/// `X + K` is a g-martingale: `dK_t = X_t - G(X_{t+1} | F_t)`, assigned on
/// the parent node. A g-supermartingale yields an increasing `K`, a
/// g-submartingale a decreasing one.
pub fn doob_meyer<D: Driver>(
    tree: &ScenarioTree,
    x: &AdaptedProcess,
    driver: &D,
) -> Result<DoobMeyer, BsdeError> {
    if !driver.is_normalised() {
        return Err(BsdeError::NotNormalised);
    }
    let mut increments: Vec<Option<f64>> = vec![None; tree.node_count()];
    let mut k = AdaptedProcess::zeros(tree);
    // forward pass: K at a child is K at the parent plus the parent increment
    let mut order: Vec<NodeId> = tree.ids().collect();
    order.sort_by_key(|&n| (tree.node(n).time, n.index()));
    for node in order {
        if tree.is_terminal(node) {
            continue;
        }
        let child_values = tree.child_values(x, node);
        let g = g_one_step(tree, node, driver, &child_values)?;
        let dk = x.get(node) - g;
        increments[node.index()] = Some(dk);
        let base = k.get(node);
        for c in &tree.node(node).children {
            k.set(c.node, base + dk);
        }
    }
    let tol = 1e-12;
    let has_up = increments.iter().flatten().any(|&d| d > tol);
    let has_down = increments.iter().flatten().any(|&d| d < -tol);
    let direction = match (has_up, has_down) {
        (true, true) => MonotoneDirection::Neither,
        (false, true) => MonotoneDirection::Decreasing,
        _ => MonotoneDirection::Increasing,
    };
    Ok(DoobMeyer {
        k,
        increments,
        direction,
    })
}

/// Samples equivalence-respecting behaviour of a driver: perturbs `z` by
/// support constants and off-support bumps and reports nodes where `f`
/// separates equivalent arguments.
pub fn audit_equivalence<D: Driver>(
    tree: &ScenarioTree,
    driver: &D,
    tol: f64,
) -> Vec<(NodeId, f64)> {
    let probe = [
        DVector::from_fn(tree.state_count(), |i, _| (i as f64 + 1.0).sin()),
        DVector::from_fn(tree.state_count(), |i, _| 1.0 - 0.3 * i as f64),
    ];
    let mut violations = Vec::new();
    for node in tree.non_terminal() {
        let stats = tree.stats(node).unwrap();
        let mut worst = 0.0_f64;
        for z in &probe {
            let base = driver.eval(tree, node, 0.7, z);
            // add a constant (null direction)
            let shifted = z.add_scalar(1.3);
            worst = worst.max((driver.eval(tree, node, 0.7, &shifted) - base).abs());
            // bump an off-support coordinate
            for i in 0..tree.state_count() {
                if !stats.support.contains(&i) {
                    let mut bumped = z.clone();
                    bumped[i] += 2.0;
                    worst = worst.max((driver.eval(tree, node, 0.7, &bumped) - base).abs());
                }
            }
        }
        if worst > tol {
            violations.push((node, worst));
        }
    }
    violations
}

/// Data of one comparison-theorem side: terminal values, driver, optional
/// obstacle.
pub struct ComparisonData<'a, D: Driver> {
    pub terminal: &'a AdaptedProcess,
    pub driver: &'a D,
    pub obstacle: Option<&'a AdaptedProcess>,
}

/// Outcome of one hypothesis: whether it holds everywhere and the worst
/// violation found.
#[derive(Clone, Debug)]
pub struct HypothesisCheck {
    pub holds: bool,
    /// Most negative margin over the checked nodes (0 when it holds with
    /// equality or better).
    pub worst_margin: f64,
    pub worst_node: Option<NodeId>,
}

impl HypothesisCheck {
    fn from_margins(margins: impl Iterator<Item = (NodeId, f64)>, tol: f64) -> Self {
        let mut worst = f64::INFINITY;
        let mut worst_node = None;
        for (n, m) in margins {
            if m < worst {
                worst = m;
                worst_node = Some(n);
            }
        }
        if worst == f64::INFINITY {
            worst = 0.0;
        }
        HypothesisCheck {
            holds: worst >= -tol,
            worst_margin: worst.min(0.0),
            worst_node,
        }
    }
}

/// Node-by-node report of the comparison-theorem hypotheses and conclusion.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    /// (i) terminal dominance `xi1 >= xi2` on leaves.
    pub terminal_dominance: HypothesisCheck,
    /// (ii) driver dominance `f1 >= f2` at `(Y2, Z2)`.
    pub driver_dominance: HypothesisCheck,
    /// (iii) obstacle dominance `S1 >= S2` (vacuous without obstacles).
    pub obstacle_dominance: HypothesisCheck,
    /// (iv) the minimum-increment inequality over the support.
    pub min_increment: HypothesisCheck,
    /// (v) strict monotonicity of `y -> y - f1(t, y, Z1)` (sampled).
    pub strict_monotonicity: HypothesisCheck,
    /// Conclusion: `Y1 >= Y2` at every node.
    pub conclusion_holds: bool,
    pub conclusion_worst_margin: f64,
    /// When `Y1 = Y2` on an initial time range, whether `K1 - K2` is
    /// nonincreasing there (`None` when the Ys differ already at the root or
    /// no K data was supplied).
    pub k_difference_decreasing: Option<bool>,
}

/// Checks the comparison-theorem hypotheses (i)-(v) for two solved problems
/// and reports whether the ordering conclusion holds. `k1`/`k2` optionally
/// supply cumulative reflection processes for the corollary check.
#[allow(clippy::too_many_arguments)]
pub fn comparison_check<D1: Driver, D2: Driver>(
    tree: &ScenarioTree,
    data1: &ComparisonData<'_, D1>,
    data2: &ComparisonData<'_, D2>,
    sol1: &BsdeSolution,
    sol2: &BsdeSolution,
    k1: Option<&AdaptedProcess>,
    k2: Option<&AdaptedProcess>,
) -> ComparisonReport {
    let tol = 1e-12;

    let terminal_dominance = HypothesisCheck::from_margins(
        tree.leaves()
            .map(|n| (n, data1.terminal.get(n) - data2.terminal.get(n))),
        tol,
    );

    let driver_dominance = HypothesisCheck::from_margins(
        tree.non_terminal().map(|n| {
            let y2 = sol2.y.get(n);
            let z2 = sol2.z_at(n);
            (
                n,
                data1.driver.eval(tree, n, y2, z2) - data2.driver.eval(tree, n, y2, z2),
            )
        }),
        tol,
    );

    let obstacle_dominance = match (data1.obstacle, data2.obstacle) {
        (Some(s1), Some(s2)) => HypothesisCheck::from_margins(
            tree.ids().map(|n| (n, s1.get(n) - s2.get(n))),
            tol,
        ),
        _ => HypothesisCheck {
            holds: true,
            worst_margin: 0.0,
            worst_node: None,
        },
    };

    let min_increment = HypothesisCheck::from_margins(
        tree.non_terminal().map(|n| {
            let y2 = sol2.y.get(n);
            let z1 = sol1.z_at(n);
            let z2 = sol2.z_at(n);
            let lhs = data1.driver.eval(tree, n, y2, z1) - data1.driver.eval(tree, n, y2, z2);
            let dz = z1.as_vector() - z2.as_vector();
            let min_pair = tree
                .node(n)
                .children
                .iter()
                .enumerate()
                .filter(|(_, c)| c.prob > 0.0)
                .map(|(k, _)| dz.dot(&tree.m_increment(n, k).unwrap()))
                .fold(f64::INFINITY, f64::min);
            (n, lhs - min_pair)
        }),
        tol,
    );

    let strict_monotonicity = HypothesisCheck::from_margins(
        tree.non_terminal().map(|n| {
            let z1 = sol1.z_at(n);
            let anchor = sol2.y.get(n);
            let mut worst = f64::INFINITY;
            for dy in [1e-4, 1.0, 10.0] {
                for base in [anchor - 5.0, anchor, anchor + 5.0] {
                    let lo = base - data1.driver.eval(tree, n, base, z1);
                    let hi = (base + dy) - data1.driver.eval(tree, n, base + dy, z1);
                    worst = worst.min(hi - lo);
                }
            }
            (n, worst)
        }),
        tol,
    );

    let mut conclusion_worst = f64::INFINITY;
    for n in tree.ids() {
        conclusion_worst = conclusion_worst.min(sol1.y.get(n) - sol2.y.get(n));
    }
    let conclusion_holds = conclusion_worst >= -IDENTITY_TOL;

    let k_difference_decreasing = match (k1, k2) {
        (Some(k1), Some(k2)) => {
            // largest initial time range on which the Ys agree
            let mut t0: Option<usize> = None;
            'outer: for t in 0..=tree.horizon() {
                for n in tree.nodes_at(t) {
                    if (sol1.y.get(n) - sol2.y.get(n)).abs() > IDENTITY_TOL {
                        break 'outer;
                    }
                }
                t0 = Some(t);
            }
            t0.map(|t0| {
                let cutoff = (t0 + 1).min(tree.horizon());
                tree.ids()
                    .filter(|&n| {
                        tree.node(n).time < cutoff && !tree.is_terminal(n)
                    })
                    .all(|n| {
                        tree.node(n).children.iter().all(|c| {
                            let here = k1.get(n) - k2.get(n);
                            let next = k1.get(c.node) - k2.get(c.node);
                            next <= here + 1e-9
                        })
                    })
            })
        }
        _ => None,
    };

    ComparisonReport {
        terminal_dominance,
        driver_dominance,
        obstacle_dominance,
        min_increment,
        strict_monotonicity,
        conclusion_holds,
        conclusion_worst_margin: conclusion_worst.min(0.0),
        k_difference_decreasing,
    }
}
