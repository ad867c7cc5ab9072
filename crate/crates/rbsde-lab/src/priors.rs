//! Time-consistent multiple-prior families built from per-node drift
//! selections.
//!
//! A selection assigns each non-terminal node a Q-vector `theta`; the tilted
//! one-step law is `q = p + theta` and the terminal density is the product of
//! one-step ratios along the path. Two concrete families are provided:
//! kappa-ignorance (drifts bounded in a covariance-weighted norm) and
//! scenario perturbations (mixtures toward finitely many stress laws), plus
//! fully explicit per-node option sets. A brute-force backward recursion
//! over per-node extreme drifts serves as the robust-expectation oracle
//! against the BSDE route.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::{Driver, PerNode};
use crate::tree::{AdaptedProcess, NodeId, NodeStats, QVector, ScenarioTree, TreeError};

#[derive(Error, Debug)]
pub enum PriorError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid theta at node {node}: {reason}")]
    InvalidTheta { node: String, reason: String },
    #[error("kappa = {kappa} inadmissible at node {node}: the drift ball leaves [0, 1]")]
    KappaInadmissible { node: String, kappa: f64 },
    #[error("scenario {index} not absolutely continuous at node {node} (component {state})")]
    ScenarioNotAbsolutelyContinuous {
        node: String,
        index: usize,
        state: usize,
    },
    #[error("invalid prior family: {0}")]
    BadFamily(String),
}

/// Which seminorm appears in the worst-case driver. The drift constraint set
/// is the dual ball: the `M` driver pairs with `theta* psi_pinv theta <=
/// kappa^2`, the `Mplus` driver with `theta* psi theta <= kappa^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MNorm {
    M,
    Mplus,
}

/// One drift per non-terminal node; each must be a Q-vector with
/// `0 <= p + theta <= 1` componentwise on the support.
#[derive(Clone, Debug)]
pub struct ThetaSelection {
    thetas: Vec<Option<QVector>>,
}

impl ThetaSelection {
    pub fn zero(tree: &ScenarioTree) -> Self {
        let thetas = tree
            .ids()
            .map(|n| (!tree.is_terminal(n)).then(|| QVector::zero(tree.state_count())))
            .collect();
        ThetaSelection { thetas }
    }

    /// Builds and validates a selection from per-node vectors.
    pub fn new(
        tree: &ScenarioTree,
        mut thetas: impl FnMut(NodeId) -> DVector<f64>,
    ) -> Result<Self, PriorError> {
        let mut out = vec![None; tree.node_count()];
        for node in tree.non_terminal() {
            let v = thetas(node);
            validate_theta(tree, node, &v)?;
            out[node.index()] = Some(QVector::canonical(tree.stats(node)?, v));
        }
        Ok(ThetaSelection { thetas: out })
    }

    pub fn at(&self, node: NodeId) -> &QVector {
        self.thetas[node.index()]
            .as_ref()
            .expect("non-terminal node")
    }

    /// Pastes `other` onto `self` from time `t` on, on paths passing through
    /// `event` (a set of time-`t` nodes). Pasting two admissible selections
    /// is again admissible since admissibility is decided node by node.
    pub fn paste(
        &self,
        tree: &ScenarioTree,
        other: &ThetaSelection,
        t: usize,
        event: &[NodeId],
    ) -> ThetaSelection {
        let mut out = self.clone();
        for node in tree.non_terminal() {
            if tree.node(node).time < t {
                continue;
            }
            let ancestor = tree
                .path_to(node)
                .into_iter()
                .find(|&n| tree.node(n).time == t);
            if let Some(a) = ancestor {
                if event.contains(&a) {
                    out.thetas[node.index()] = other.thetas[node.index()].clone();
                }
            }
        }
        out
    }
}

fn validate_theta(tree: &ScenarioTree, node: NodeId, v: &DVector<f64>) -> Result<(), PriorError> {
    let stats = tree.stats(node)?;
    let label = || tree.node(node).label.clone();
    if v.len() != tree.state_count() {
        return Err(PriorError::InvalidTheta {
            node: label(),
            reason: format!("{} components, expected {}", v.len(), tree.state_count()),
        });
    }
    if v.iter().sum::<f64>().abs() > 1e-9 {
        return Err(PriorError::InvalidTheta {
            node: label(),
            reason: "components do not sum to zero".into(),
        });
    }
    for i in 0..v.len() {
        if !stats.support.contains(&i) {
            if v[i].abs() > 1e-12 {
                return Err(PriorError::InvalidTheta {
                    node: label(),
                    reason: format!("nonzero component {i} off the support"),
                });
            }
            continue;
        }
        let q = stats.p[i] + v[i];
        if !(-1e-12..=1.0 + 1e-12).contains(&q) {
            return Err(PriorError::InvalidTheta {
                node: label(),
                reason: format!("p + theta = {q} outside [0, 1] at component {i}"),
            });
        }
    }
    Ok(())
}

/// The tilted measure generated by a selection: per-node child laws and the
/// terminal density of the measure change.
#[derive(Clone, Debug)]
pub struct TiltedMeasure {
    /// `q = p + theta` per non-terminal node.
    pub child_laws: Vec<Option<DVector<f64>>>,
    /// Terminal density per leaf: the product of one-step ratios `q_i / p_i`
    /// along the path.
    pub leaf_density: Vec<(NodeId, f64)>,
    /// `E_P[density] - 1`.
    pub normalization_err: f64,
    /// Max gap between the ratio product and the independent representation
    /// `prod (1 + theta* psi_pinv M)`.
    pub product_form_err: f64,
}

/// Materializes the measure generated by a selection: one-step laws
/// `q = p + theta`, terminal densities, and the agreement between the two
/// product forms of the density.
pub fn measure_from_theta(
    tree: &ScenarioTree,
    sel: &ThetaSelection,
) -> Result<TiltedMeasure, PriorError> {
    let mut child_laws: Vec<Option<DVector<f64>>> = vec![None; tree.node_count()];
    for node in tree.non_terminal() {
        let stats = tree.stats(node)?;
        let theta = sel.at(node);
        validate_theta(tree, node, theta.as_vector())?;
        child_laws[node.index()] = Some(&stats.p + theta.as_vector());
    }
    let mut leaf_density = Vec::new();
    let mut expectation = 0.0;
    let mut product_form_err = 0.0_f64;
    for leaf in tree.leaves() {
        let path = tree.path_to(leaf);
        let mut ratio_product = 1.0;
        let mut repr_product = 1.0;
        for w in path.windows(2) {
            let (node, next) = (w[0], w[1]);
            let stats = tree.stats(node)?;
            let k = tree
                .node(node)
                .children
                .iter()
                .position(|c| c.node == next)
                .expect("edge on path");
            let state = tree.node(node).children[k].state;
            let q = child_laws[node.index()].as_ref().unwrap()[state];
            let p = stats.p[state];
            ratio_product *= if p > 0.0 { q / p } else { 0.0 };
            let m = tree.m_increment(node, k)?;
            repr_product *= 1.0 + sel.at(node).dot(&(&stats.psi_pinv * &m));
        }
        product_form_err = product_form_err.max((ratio_product - repr_product).abs());
        expectation += tree.path_prob(leaf) * ratio_product;
        leaf_density.push((leaf, ratio_product));
    }
    Ok(TiltedMeasure {
        child_laws,
        leaf_density,
        normalization_err: expectation - 1.0,
        product_form_err,
    })
}

/// Conditional mean of the martingale increment under the tilted measure;
/// equals `theta` componentwise for a valid selection.
pub fn tilted_increment_mean(
    tree: &ScenarioTree,
    sel: &ThetaSelection,
    node: NodeId,
) -> Result<DVector<f64>, PriorError> {
    let stats = tree.stats(node)?;
    let theta = sel.at(node);
    let mut mean = DVector::zeros(tree.state_count());
    for (k, c) in tree.node(node).children.iter().enumerate() {
        let q = stats.p[c.state] + theta[c.state];
        mean += tree.m_increment(node, k)? * q;
    }
    Ok(mean)
}

/// Description of a time-consistent family of measures via admissible
/// per-node drifts. Time consistency is structural: admissibility is decided
/// node by node, so pasting two admissible selections stays in the family.
#[derive(Clone, Debug)]
pub enum PriorFamily {
    KappaIgnorance {
        kappa: PerNode<f64>,
        norm: MNorm,
    },
    Scenario {
        kappa: f64,
        /// Stress laws, shared across nodes; each must be absolutely
        /// continuous w.r.t. the node law wherever it is used.
        scenarios: Vec<DVector<f64>>,
    },
    /// Finite per-node drift option sets (indexed by node), each containing
    /// `theta = 0` so the family contains the reference measure.
    Explicit { options: Vec<Vec<DVector<f64>>> },
}

impl PriorFamily {
    /// Validates the family against a tree: kappa balls must stay inside the
    /// probability simplex, scenarios must be absolutely continuous laws,
    /// explicit options must be valid drifts containing zero.
    pub fn validate(&self, tree: &ScenarioTree) -> Result<(), PriorError> {
        match self {
            PriorFamily::KappaIgnorance { kappa, norm } => {
                for node in tree.non_terminal() {
                    let stats = tree.stats(node)?;
                    let k = *kappa.at(node);
                    if k < 0.0 {
                        return Err(PriorError::BadFamily(format!("kappa = {k} negative")));
                    }
                    // max |theta_i| over the ball is kappa times the dual
                    // reach of the coordinate direction
                    for &i in &stats.support {
                        let e_i = DVector::from_fn(
                            tree.state_count(),
                            |j, _| if j == i { 1.0 } else { 0.0 },
                        );
                        let reach = match norm {
                            MNorm::M => k * stats.m_norm(&e_i),
                            MNorm::Mplus => k * stats.m_plus_norm(&e_i),
                        };
                        if stats.p[i] - reach < -1e-12 || stats.p[i] + reach > 1.0 + 1e-12 {
                            return Err(PriorError::KappaInadmissible {
                                node: tree.node(node).label.clone(),
                                kappa: k,
                            });
                        }
                    }
                }
                Ok(())
            }
            PriorFamily::Scenario { kappa, scenarios } => {
                if !(0.0..=1.0).contains(kappa) {
                    return Err(PriorError::BadFamily(format!(
                        "scenario kappa = {kappa} outside [0, 1]"
                    )));
                }
                for (idx, pi) in scenarios.iter().enumerate() {
                    if pi.len() != tree.state_count() {
                        return Err(PriorError::BadFamily(format!(
                            "scenario {idx} has {} components, expected {}",
                            pi.len(),
                            tree.state_count()
                        )));
                    }
                    if pi.iter().any(|&x| x < -1e-12)
                        || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    {
                        return Err(PriorError::BadFamily(format!(
                            "scenario {idx} is not a probability vector"
                        )));
                    }
                    for node in tree.non_terminal() {
                        let stats = tree.stats(node)?;
                        for i in 0..tree.state_count() {
                            if stats.p[i] == 0.0 && pi[i] > 1e-12 {
                                return Err(PriorError::ScenarioNotAbsolutelyContinuous {
                                    node: tree.node(node).label.clone(),
                                    index: idx,
                                    state: i,
                                });
                            }
                        }
                    }
                }
                Ok(())
            }
            PriorFamily::Explicit { options } => {
                if options.len() != tree.node_count() {
                    return Err(PriorError::BadFamily(format!(
                        "{} option sets for {} nodes",
                        options.len(),
                        tree.node_count()
                    )));
                }
                for node in tree.non_terminal() {
                    let opts = &options[node.index()];
                    if opts.is_empty() {
                        return Err(PriorError::BadFamily(format!(
                            "no options at node {}",
                            tree.node(node).label
                        )));
                    }
                    if !opts.iter().any(|v| v.amax() < 1e-15) {
                        return Err(PriorError::BadFamily(format!(
                            "option set at node {} does not contain theta = 0",
                            tree.node(node).label
                        )));
                    }
                    for v in opts {
                        validate_theta(tree, node, v)?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Driver `f(z) = -kappa_t ||z||` for the chosen seminorm: the worst-case
/// one-step drift over the kappa-ignorance family. Normalised and z-only.
#[derive(Clone, Debug)]
pub struct KappaDriver {
    kappa: PerNode<f64>,
    norm: MNorm,
}

/// Builds the kappa-ignorance driver, checking that the drift ball stays
/// inside the probability simplex at every node.
pub fn kappa_driver(
    tree: &ScenarioTree,
    kappa: PerNode<f64>,
    norm: MNorm,
) -> Result<KappaDriver, PriorError> {
    PriorFamily::KappaIgnorance {
        kappa: kappa.clone(),
        norm,
    }
    .validate(tree)?;
    Ok(KappaDriver { kappa, norm })
}

impl KappaDriver {
    pub fn kappa_at(&self, node: NodeId) -> f64 {
        *self.kappa.at(node)
    }

    pub fn norm(&self) -> MNorm {
        self.norm
    }
}

impl Driver for KappaDriver {
    fn eval(&self, tree: &ScenarioTree, node: NodeId, _y: f64, z: &DVector<f64>) -> f64 {
        let stats = tree.stats(node).expect("non-terminal node");
        let n = match self.norm {
            MNorm::M => stats.m_norm(z),
            MNorm::Mplus => stats.m_plus_norm(z),
        };
        -*self.kappa.at(node) * n
    }
    fn beta(&self, _: &ScenarioTree, _: NodeId) -> Option<f64> {
        Some(0.0)
    }
    fn depends_on_y(&self) -> bool {
        false
    }
    fn is_normalised(&self) -> bool {
        true
    }
}

/// Driver `f(z) = kappa min_i z*(pi_i - p)` over the scenario laws
/// (including `i = 0`, the reference law, so `f <= 0`). Normalised, z-only.
#[derive(Clone, Debug)]
pub struct ScenarioDriver {
    kappa: f64,
    scenarios: Vec<DVector<f64>>,
}

/// Builds the scenario-perturbation driver, checking absolute continuity of
/// every scenario law at every node.
pub fn scenario_driver(
    tree: &ScenarioTree,
    kappa: f64,
    scenarios: Vec<DVector<f64>>,
) -> Result<ScenarioDriver, PriorError> {
    PriorFamily::Scenario {
        kappa,
        scenarios: scenarios.clone(),
    }
    .validate(tree)?;
    Ok(ScenarioDriver { kappa, scenarios })
}

impl ScenarioDriver {
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn scenarios(&self) -> &[DVector<f64>] {
        &self.scenarios
    }

    /// The per-node extreme drifts: `theta = 0` and `kappa (pi int - p)`;
    /// the objective is linear in the mixing weight, so these vertices are
    /// enough.
    pub fn extreme_thetas(&self, stats: &NodeStats) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(stats.p.len())];
        for pi in &self.scenarios {
            out.push((pi - &stats.p) * self.kappa);
        }
        out
    }
}

impl Driver for ScenarioDriver {
    fn eval(&self, tree: &ScenarioTree, node: NodeId, _y: f64, z: &DVector<f64>) -> f64 {
        let stats = tree.stats(node).expect("non-terminal node");
        let mut worst = 0.0_f64; // i = 0 contributes z*(p - p) = 0
        for pi in &self.scenarios {
            worst = worst.min(z.dot(&(pi - &stats.p)));
        }
        self.kappa * worst
    }
    fn beta(&self, _: &ScenarioTree, _: NodeId) -> Option<f64> {
        Some(0.0)
    }
    fn depends_on_y(&self) -> bool {
        false
    }
    fn is_normalised(&self) -> bool {
        true
    }
}

/// Robust conditional expectation computed by backward recursion over finite
/// per-node drift options.
#[derive(Clone, Debug)]
pub struct RobustExpectation {
    pub value: f64,
    /// Sound bound on the distance to the exact optimum over the family:
    /// zero for scenario/explicit families and for kappa-ignorance on
    /// one-dimensional Q-spaces, the accumulated discretization error
    /// otherwise.
    pub gap: f64,
}

/// Evenly spaced directions used on two-dimensional Q-spaces.
const CIRCLE_DIRECTIONS: usize = 64;
/// Deterministic pseudo-random directions above dimension two.
const SPHERE_DIRECTIONS: usize = 500;

/// Finite set of extreme drifts of the kappa ball: the exact segment
/// endpoints in dimension one, a direction net on the boundary above.
fn kappa_ball_extremes(stats: &NodeStats, kappa: f64, norm: MNorm) -> Vec<DVector<f64>> {
    let m = stats.p.len();
    let mut out = vec![DVector::zeros(m)];
    if kappa <= 0.0 {
        return out;
    }
    let basis = stats.q_basis();
    // the constraint quadratic form dual to the driver norm
    let form = match norm {
        MNorm::M => &stats.psi_pinv,
        MNorm::Mplus => &stats.psi,
    };
    let mut push_dir = |dir: DVector<f64>| {
        let quad = dir.dot(&(form * &dir));
        if quad > 1e-14 {
            let scale = kappa / quad.sqrt();
            out.push(&dir * scale);
            out.push(&dir * -scale);
        }
    };
    match basis.len() {
        0 => {}
        1 => push_dir(basis[0].clone()),
        2 => {
            for k in 0..CIRCLE_DIRECTIONS {
                let angle = std::f64::consts::PI * (k as f64) / (CIRCLE_DIRECTIONS as f64);
                push_dir(&basis[0] * angle.cos() + &basis[1] * angle.sin());
            }
        }
        d => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed_0123);
            for _ in 0..SPHERE_DIRECTIONS {
                // Box-Muller gaussians in Q-space coordinates
                let coeffs: Vec<f64> = (0..d)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                let mut dir = DVector::zeros(m);
                for (b, &c) in basis.iter().zip(&coeffs) {
                    dir += b * c;
                }
                if dir.norm() > 1e-12 {
                    push_dir(dir);
                }
            }
        }
    }
    out
}

/// Exact optimum of `sum_i (p_i + theta_i) v_i` over the kappa ball,
/// `p* v -/+ kappa ||v||`; used only to report the discretization gap.
fn kappa_ball_exact(
    stats: &NodeStats,
    kappa: f64,
    norm: MNorm,
    v: &DVector<f64>,
    mode: OptDirection,
) -> f64 {
    let base = stats.p.dot(v);
    let n = match norm {
        MNorm::M => stats.m_norm(v),
        MNorm::Mplus => stats.m_plus_norm(v),
    };
    match mode {
        OptDirection::Inf => base - kappa * n,
        OptDirection::Sup => base + kappa * n,
    }
}

/// Direction of the robust optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptDirection {
    Inf,
    Sup,
}

impl OptDirection {
    fn init(self) -> f64 {
        match self {
            OptDirection::Inf => f64::INFINITY,
            OptDirection::Sup => f64::NEG_INFINITY,
        }
    }
    fn pick(self, a: f64, b: f64) -> f64 {
        match self {
            OptDirection::Inf => a.min(b),
            OptDirection::Sup => a.max(b),
        }
    }
}

/// Brute-force robust conditional expectation of a terminal payoff at a
/// node: the backward recursion `V_t = opt over per-node drift options of
/// sum (p_i + theta_i) V_{t+1}`, which equals the opt over all measurable
/// selections by per-node decomposability. For kappa-ignorance the per-node
/// options discretize the drift ball; the reported gap soundly bounds the
/// approximation error and is zero when the Q-space dimension is one.
pub fn robust_expectation_oracle(
    tree: &ScenarioTree,
    xi: &AdaptedProcess,
    family: &PriorFamily,
    node: NodeId,
    mode: OptDirection,
) -> Result<RobustExpectation, PriorError> {
    family.validate(tree)?;
    let mut value = vec![0.0_f64; tree.node_count()];
    let mut gap = vec![0.0_f64; tree.node_count()];
    let mut order = tree.subtree(node);
    order.sort_by_key(|&n| std::cmp::Reverse((tree.node(n).time, n.index())));
    for n in order {
        if tree.is_terminal(n) {
            value[n.index()] = xi.get(n);
            continue;
        }
        let stats = tree.stats(n)?;
        let child_vals: Vec<f64> = tree
            .node(n)
            .children
            .iter()
            .map(|c| value[c.node.index()])
            .collect();
        let child_gap = tree
            .node(n)
            .children
            .iter()
            .map(|c| gap[c.node.index()])
            .fold(0.0_f64, f64::max);
        let (options, ball) = match family {
            PriorFamily::KappaIgnorance { kappa, norm } => {
                let k = *kappa.at(n);
                (kappa_ball_extremes(stats, k, *norm), Some((k, *norm)))
            }
            PriorFamily::Scenario { kappa, scenarios } => {
                let mut opts = vec![DVector::zeros(tree.state_count())];
                for pi in scenarios {
                    opts.push((pi - &stats.p) * *kappa);
                }
                (opts, None)
            }
            PriorFamily::Explicit { options } => (options[n.index()].clone(), None),
        };
        let mut best = mode.init();
        for theta in &options {
            let mut v = 0.0;
            for (c, &cv) in tree.node(n).children.iter().zip(&child_vals) {
                v += (stats.p[c.state] + theta[c.state]) * cv;
            }
            best = mode.pick(best, v);
        }
        value[n.index()] = best;
        // realized discretization gap against the exact ball optimum; the
        // optimum over the family is 1-Lipschitz in the child values, so
        // child gaps add up
        let node_gap = match ball {
            Some((k, norm)) if stats.q_dim() >= 2 => {
                let mut v = DVector::zeros(tree.state_count());
                for (c, &cv) in tree.node(n).children.iter().zip(&child_vals) {
                    v[c.state] = cv;
                }
                (best - kappa_ball_exact(stats, k, norm, &v, mode)).abs()
            }
            _ => 0.0,
        };
        gap[n.index()] = child_gap + node_gap;
    }
    Ok(RobustExpectation {
        value: value[node.index()],
        gap: gap[node.index()],
    })
}
