//! Explicit scenario trees: the discrete-time, finite-state filtered
//! probability space, together with conditional-moment and
//! martingale-representation primitives.
//!
//! A tree node at time `t` carries the one-step conditional law of the state
//! process over the basis states `{0..m-1}`. Trees are non-recombining by
//! construction so that the filtration is exactly the path history.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance accepted on per-node probability sums at build time; rows within
/// this distance of 1 are renormalized exactly.
pub const PROB_SUM_TOL: f64 = 1e-9;
/// Relative eigenvalue cutoff for the Moore–Penrose pseudoinverse of psi.
pub const PINV_CUTOFF: f64 = 1e-12;
/// Tolerance on the conditional mean of a martingale increment.
pub const CENTERED_TOL: f64 = 1e-10;

#[derive(Error, Debug)]
pub enum TreeError {
    #[error("node {node}: child probabilities sum to {sum}, not 1")]
    NonStochasticLaw { node: String, sum: f64 },
    #[error("node {node}: no child with positive probability")]
    EmptySupport { node: String },
    #[error("depth mismatch: {0}")]
    DepthMismatch(String),
    #[error("node {node}: duplicate child state {state}")]
    DuplicateState { node: String, state: usize },
    #[error("invalid tree spec: {0}")]
    BadSpec(String),
    #[error("node {node} is terminal")]
    TerminalNode { node: String },
    #[error("martingale increment not centered: conditional mean {mean}")]
    NotCentered { mean: f64 },
    #[error("invalid stopping time: {0}")]
    InvalidStoppingTime(String),
}

/// Index of a node inside a [`ScenarioTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Edge from a node to one of its children, labeled by the state reached.
#[derive(Clone, Debug)]
pub struct ChildEdge {
    /// 0-based state index in `{0..m-1}`.
    pub state: usize,
    /// Conditional probability of reaching the child.
    pub prob: f64,
    pub node: NodeId,
}

#[derive(Clone, Debug)]
pub struct Node {
    /// Stable string label, used in reports and JSON specs.
    pub label: String,
    pub time: usize,
    pub parent: Option<NodeId>,
    /// State reached by the edge from the parent (none at the root).
    pub state: Option<usize>,
    pub children: Vec<ChildEdge>,
}

/// Conditional one-step moments at a non-terminal node: the law `p`, its
/// support, the covariance `psi = diag(p) - p p*` of the next state indicator
/// and the Moore–Penrose pseudoinverse of `psi`.
#[derive(Clone, Debug)]
pub struct NodeStats {
    pub p: DVector<f64>,
    /// Indices with positive conditional probability.
    pub support: Vec<usize>,
    pub psi: DMatrix<f64>,
    pub psi_pinv: DMatrix<f64>,
}

impl NodeStats {
    fn new(p: DVector<f64>) -> Self {
        let m = p.len();
        let support: Vec<usize> = (0..m).filter(|&i| p[i] > 0.0).collect();
        let psi = DMatrix::from_fn(m, m, |i, j| {
            let d = if i == j { p[i] } else { 0.0 };
            d - p[i] * p[j]
        });
        let psi_pinv = sym_pinv(&psi);
        NodeStats {
            p,
            support,
            psi,
            psi_pinv,
        }
    }

    /// Seminorm `sqrt(z* psi z)`; vanishes exactly on directions equivalent
    /// to zero (constants on the support plus off-support directions).
    pub fn m_norm(&self, z: &DVector<f64>) -> f64 {
        (z.dot(&(&self.psi * z))).max(0.0).sqrt()
    }

    /// Dual seminorm `sqrt(z* psi_pinv z)`, with the same null directions.
    pub fn m_plus_norm(&self, z: &DVector<f64>) -> f64 {
        (z.dot(&(&self.psi_pinv * z))).max(0.0).sqrt()
    }

    /// Dimension of the Q-vector space at the node (`|support| - 1`).
    pub fn q_dim(&self) -> usize {
        self.support.len().saturating_sub(1)
    }

    /// Orthonormal basis of the Q-vector space (range of `psi`).
    pub fn q_basis(&self) -> Vec<DVector<f64>> {
        let m = self.p.len();
        let mut basis = Vec::new();
        // Gram-Schmidt over the differences e_i - e_i0 restricted to the support.
        if self.support.len() < 2 {
            return basis;
        }
        let i0 = self.support[0];
        for &i in &self.support[1..] {
            let mut v = DVector::zeros(m);
            v[i] = 1.0;
            v[i0] = -1.0;
            for b in &basis {
                let c = v.dot(b);
                v -= b * c;
            }
            let n = v.norm();
            if n > 1e-14 {
                basis.push(v / n);
            }
        }
        basis
    }
}

/// Checks a kernel row: nonnegative entries of length `m`, sum within
/// [`PROB_SUM_TOL`] of 1, at least one positive entry. Returns the
/// renormalized row.
fn validated_row(raw: &[f64], m: usize, what: &str) -> Result<Vec<f64>, TreeError> {
    if raw.len() != m {
        return Err(TreeError::BadSpec(format!(
            "{what}: {} entries, expected {m}",
            raw.len()
        )));
    }
    if let Some(&bad) = raw.iter().find(|&&p| p < 0.0) {
        return Err(TreeError::NonStochasticLaw {
            node: what.to_string(),
            sum: bad,
        });
    }
    let sum: f64 = raw.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(TreeError::NonStochasticLaw {
            node: what.to_string(),
            sum,
        });
    }
    if !raw.iter().any(|&p| p > 0.0) {
        return Err(TreeError::EmptySupport {
            node: what.to_string(),
        });
    }
    Ok(raw.iter().map(|&p| p / sum).collect())
}

/// Pseudoinverse of a symmetric PSD matrix by spectral decomposition with a
/// relative eigenvalue cutoff.
pub(crate) fn sym_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let mut inv = DMatrix::zeros(m, m);
    if lam_max <= 0.0 {
        return inv;
    }
    let cutoff = PINV_CUTOFF * lam_max;
    for k in 0..m {
        let lam = eig.eigenvalues[k];
        if lam > cutoff {
            let v = eig.eigenvectors.column(k);
            inv += DMatrix::from_fn(m, m, |i, j| v[i] * v[j] / lam);
        }
    }
    inv
}

/// A martingale-representation coordinate: an `m`-vector summing to zero and
/// supported on the node's possible states. Constructed canonically (the
/// representative orthogonal to the equivalence-null directions).
#[derive(Clone, Debug)]
pub struct QVector {
    v: DVector<f64>,
}

impl QVector {
    /// Canonicalizes `v`: zeroes the off-support components and removes the
    /// support-constant component, neither of which affects pairings with
    /// martingale increments.
    pub fn canonical(stats: &NodeStats, mut v: DVector<f64>) -> Self {
        let m = v.len();
        for i in 0..m {
            if !stats.support.contains(&i) {
                v[i] = 0.0;
            }
        }
        if !stats.support.is_empty() {
            let mean: f64 =
                stats.support.iter().map(|&i| v[i]).sum::<f64>() / stats.support.len() as f64;
            for &i in &stats.support {
                v[i] -= mean;
            }
        }
        QVector { v }
    }

    pub fn zero(m: usize) -> Self {
        QVector {
            v: DVector::zeros(m),
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.v
    }
}

impl std::ops::Deref for QVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.v
    }
}

/// JSON-facing tree description: either a homogeneous (or per-time) kernel to
/// unroll, or an explicit node list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeSpec {
    pub horizon: usize,
    pub state_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeSpec>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub time: usize,
    #[serde(default)]
    pub children: Vec<ChildSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChildSpec {
    /// 1-based state index, matching the on-disk format.
    pub state: usize,
    pub prob: f64,
    pub id: String,
}

/// The whole filtered probability space: a rooted tree with one-step
/// conditional laws, immutable after construction.
#[derive(Clone, Debug)]
pub struct ScenarioTree {
    horizon: usize,
    state_count: usize,
    nodes: Vec<Node>,
    stats: Vec<Option<NodeStats>>,
}

impl ScenarioTree {
    /// Unrolls a homogeneous kernel (one row) or a per-time kernel (`T` rows)
    /// into a full tree of depth `horizon`, materializing only
    /// positive-probability children.
    pub fn from_kernel(
        kernel: &[Vec<f64>],
        horizon: usize,
        state_count: usize,
    ) -> Result<Self, TreeError> {
        if horizon == 0 {
            return Err(TreeError::BadSpec("horizon must be at least 1".into()));
        }
        if state_count < 2 {
            return Err(TreeError::BadSpec("state_count must be at least 2".into()));
        }
        if kernel.len() != 1 && kernel.len() != horizon {
            return Err(TreeError::DepthMismatch(format!(
                "kernel has {} rows; expected 1 or horizon {}",
                kernel.len(),
                horizon
            )));
        }
        let mut rows = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let raw = if kernel.len() == 1 { &kernel[0] } else { &kernel[t] };
            rows.push(validated_row(raw, state_count, &format!("kernel row {t}"))?);
        }

        let mut nodes = vec![Node {
            label: "0".to_string(),
            time: 0,
            parent: None,
            state: None,
            children: Vec::new(),
        }];
        let mut frontier = vec![NodeId(0)];
        for row in rows.iter().take(horizon) {
            let mut next = Vec::new();
            for &nid in &frontier {
                for (i, &pi) in row.iter().enumerate() {
                    if pi <= 0.0 {
                        continue;
                    }
                    let child = NodeId(nodes.len());
                    let label = format!("{}-{}", nodes[nid.0].label, i + 1);
                    nodes.push(Node {
                        label,
                        time: nodes[nid.0].time + 1,
                        parent: Some(nid),
                        state: Some(i),
                        children: Vec::new(),
                    });
                    nodes[nid.0].children.push(ChildEdge {
                        state: i,
                        prob: pi,
                        node: child,
                    });
                    next.push(child);
                }
            }
            frontier = next;
        }
        Self::finish(horizon, state_count, nodes)
    }

    /// Builds a tree from an explicit node list. Probabilities must be
    /// nonnegative with per-node sums within [`PROB_SUM_TOL`] of 1 (rows are
    /// renormalized).
    pub fn from_nodes(
        specs: &[NodeSpec],
        horizon: usize,
        state_count: usize,
    ) -> Result<Self, TreeError> {
        if horizon == 0 {
            return Err(TreeError::BadSpec("horizon must be at least 1".into()));
        }
        if state_count < 2 {
            return Err(TreeError::BadSpec("state_count must be at least 2".into()));
        }
        let mut index = std::collections::BTreeMap::new();
        for (k, s) in specs.iter().enumerate() {
            if index.insert(s.id.clone(), k).is_some() {
                return Err(TreeError::BadSpec(format!("duplicate node id {}", s.id)));
            }
        }
        let mut nodes: Vec<Node> = specs
            .iter()
            .map(|s| Node {
                label: s.id.clone(),
                time: s.time,
                parent: None,
                state: None,
                children: Vec::new(),
            })
            .collect();
        for (k, s) in specs.iter().enumerate() {
            if s.time > horizon {
                return Err(TreeError::DepthMismatch(format!(
                    "node {} at time {} beyond horizon {}",
                    s.id, s.time, horizon
                )));
            }
            if s.time == horizon && !s.children.is_empty() {
                return Err(TreeError::DepthMismatch(format!(
                    "terminal node {} has children",
                    s.id
                )));
            }
            if s.time < horizon && s.children.is_empty() {
                return Err(TreeError::DepthMismatch(format!(
                    "node {} at time {} has no children",
                    s.id, s.time
                )));
            }
            let mut seen = Vec::new();
            let mut sum = 0.0;
            for c in &s.children {
                if c.state == 0 || c.state > state_count {
                    return Err(TreeError::BadSpec(format!(
                        "node {}: child state {} outside 1..{}",
                        s.id, c.state, state_count
                    )));
                }
                let state = c.state - 1;
                if seen.contains(&state) {
                    return Err(TreeError::DuplicateState {
                        node: s.id.clone(),
                        state: c.state,
                    });
                }
                seen.push(state);
                if c.prob < 0.0 {
                    return Err(TreeError::NonStochasticLaw {
                        node: s.id.clone(),
                        sum: c.prob,
                    });
                }
                sum += c.prob;
                let &ci = index
                    .get(&c.id)
                    .ok_or_else(|| TreeError::BadSpec(format!("unknown child id {}", c.id)))?;
                if specs[ci].time != s.time + 1 {
                    return Err(TreeError::DepthMismatch(format!(
                        "child {} of {} is at time {}, expected {}",
                        c.id,
                        s.id,
                        specs[ci].time,
                        s.time + 1
                    )));
                }
                if nodes[ci].parent.is_some() {
                    return Err(TreeError::BadSpec(format!(
                        "node {} has more than one parent",
                        c.id
                    )));
                }
                nodes[ci].parent = Some(NodeId(k));
                nodes[ci].state = Some(state);
            }
            if !s.children.is_empty() {
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    return Err(TreeError::NonStochasticLaw {
                        node: s.id.clone(),
                        sum,
                    });
                }
                if !s.children.iter().any(|c| c.prob > 0.0) {
                    return Err(TreeError::EmptySupport { node: s.id.clone() });
                }
                for c in &s.children {
                    nodes[k].children.push(ChildEdge {
                        state: c.state - 1,
                        prob: c.prob / sum,
                        node: NodeId(index[&c.id]),
                    });
                }
            }
        }
        let roots: Vec<usize> = (0..nodes.len())
            .filter(|&k| nodes[k].parent.is_none())
            .collect();
        if roots.len() != 1 || nodes[roots[0]].time != 0 {
            return Err(TreeError::BadSpec(format!(
                "expected exactly one root at time 0, found {} root(s)",
                roots.len()
            )));
        }
        if roots[0] != 0 {
            return Err(TreeError::BadSpec(
                "the root must be listed first in the node list".into(),
            ));
        }
        Self::finish(horizon, state_count, nodes)
    }

    pub fn from_spec(spec: &TreeSpec) -> Result<Self, TreeError> {
        match (&spec.kernel, &spec.nodes) {
            (Some(k), None) => Self::from_kernel(k, spec.horizon, spec.state_count),
            (None, Some(n)) => Self::from_nodes(n, spec.horizon, spec.state_count),
            _ => Err(TreeError::BadSpec(
                "a tree spec needs exactly one of `kernel` or `nodes`".into(),
            )),
        }
    }

    fn finish(
        horizon: usize,
        state_count: usize,
        mut nodes: Vec<Node>,
    ) -> Result<Self, TreeError> {
        // Normalize rows exactly so that the sum-to-one invariant holds to
        // machine precision even when the spec was only within PROB_SUM_TOL.
        for n in nodes.iter_mut() {
            if n.children.is_empty() {
                continue;
            }
            let sum: f64 = n.children.iter().map(|c| c.prob).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(TreeError::NonStochasticLaw {
                    node: n.label.clone(),
                    sum,
                });
            }
            if !n.children.iter().any(|c| c.prob > 0.0) {
                return Err(TreeError::EmptySupport {
                    node: n.label.clone(),
                });
            }
            for c in n.children.iter_mut() {
                c.prob /= sum;
            }
        }
        for n in nodes.iter() {
            if n.time < horizon && n.children.is_empty() {
                return Err(TreeError::DepthMismatch(format!(
                    "node {} at time {} has no children",
                    n.label, n.time
                )));
            }
        }
        let stats = nodes
            .iter()
            .map(|n| {
                if n.children.is_empty() {
                    None
                } else {
                    let mut p = DVector::zeros(state_count);
                    for c in &n.children {
                        p[c.state] = c.prob;
                    }
                    Some(NodeStats::new(p))
                }
            })
            .collect();
        Ok(ScenarioTree {
            horizon,
            state_count,
            nodes,
            stats,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn is_terminal(&self, id: NodeId) -> bool {
        self.nodes[id.0].children.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn nodes_at(&self, time: usize) -> impl Iterator<Item = NodeId> + '_ {
        self.ids().filter(move |&n| self.nodes[n.0].time == time)
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids().filter(move |&n| self.is_terminal(n))
    }

    pub fn non_terminal(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids().filter(move |&n| !self.is_terminal(n))
    }

    /// Non-terminal nodes in decreasing time order (children before parents).
    pub fn backward_order(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.non_terminal().collect();
        ids.sort_by(|a, b| {
            (self.nodes[b.0].time, b.0).cmp(&(self.nodes[a.0].time, a.0))
        });
        ids
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.ids().find(|&n| self.nodes[n.0].label == label)
    }

    /// Conditional one-step moments; fails on terminal nodes.
    pub fn stats(&self, id: NodeId) -> Result<&NodeStats, TreeError> {
        self.stats[id.0].as_ref().ok_or_else(|| TreeError::TerminalNode {
            node: self.nodes[id.0].label.clone(),
        })
    }

    /// Probability of reaching `id` from the root under the reference law.
    pub fn path_prob(&self, id: NodeId) -> f64 {
        let mut prob = 1.0;
        let mut cur = id;
        while let Some(parent) = self.nodes[cur.0].parent {
            let edge = self.nodes[parent.0]
                .children
                .iter()
                .find(|c| c.node == cur)
                .expect("child edge");
            prob *= edge.prob;
            cur = parent;
        }
        prob
    }

    /// Nodes from the root (inclusive) down to `id` (inclusive).
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(parent) = self.nodes[cur.0].parent {
            path.push(parent);
            cur = parent;
        }
        path.reverse();
        path
    }

    /// All nodes of the subtree rooted at `id`, in index order.
    pub fn subtree(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.push(n);
            for c in self.nodes[n.0].children.iter().rev() {
                stack.push(c.node);
            }
        }
        out.sort();
        out
    }

    /// Martingale increment along the edge to the `k`-th child:
    /// `e_state - p`, the centered one-step state indicator.
    pub fn m_increment(&self, id: NodeId, k: usize) -> Result<DVector<f64>, TreeError> {
        let stats = self.stats(id)?;
        let edge = &self.nodes[id.0].children[k];
        let mut v = -stats.p.clone();
        v[edge.state] += 1.0;
        Ok(v)
    }

    /// Values of `process` on the children of `id`, in child order.
    pub fn child_values(&self, process: &AdaptedProcess, id: NodeId) -> Vec<f64> {
        self.nodes[id.0]
            .children
            .iter()
            .map(|c| process.get(c.node))
            .collect()
    }
}

/// One real value per tree node; adaptedness is structural since a node is a
/// full history.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedProcess {
    values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &ScenarioTree) -> Self {
        AdaptedProcess {
            values: vec![0.0; tree.node_count()],
        }
    }

    pub fn constant(tree: &ScenarioTree, c: f64) -> Self {
        AdaptedProcess {
            values: vec![c; tree.node_count()],
        }
    }

    pub fn from_fn(tree: &ScenarioTree, f: impl FnMut(NodeId) -> f64) -> Self {
        AdaptedProcess {
            values: tree.ids().map(f).collect(),
        }
    }

    pub fn from_values(tree: &ScenarioTree, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), tree.node_count(), "one value per node");
        AdaptedProcess { values }
    }

    pub fn get(&self, id: NodeId) -> f64 {
        self.values[id.0]
    }

    pub fn set(&mut self, id: NodeId, v: f64) {
        self.values[id.0] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pointwise maximum absolute difference.
    pub fn sup_distance(&self, other: &AdaptedProcess) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Conditional expectation of `process` one step ahead of `node`.
pub fn conditional_expectation(
    tree: &ScenarioTree,
    process: &AdaptedProcess,
    node: NodeId,
) -> Result<f64, TreeError> {
    if tree.is_terminal(node) {
        return Err(TreeError::TerminalNode {
            node: tree.node(node).label.clone(),
        });
    }
    Ok(tree
        .node(node)
        .children
        .iter()
        .map(|c| c.prob * process.get(c.node))
        .sum())
}

/// Solves the one-step martingale representation problem: finds the unique
/// canonical Q-vector `Z` with `Z*(e_i - p) = h_i` for every state `i` in the
/// support, given per-child values `h` with conditional mean zero.
///
/// `h` is indexed like the node's child list. The solution is
/// `psi_pinv * (sum_i p_i h_i e_i)`, the representative orthogonal to the
/// null directions of the equivalence relation.
pub fn represent_martingale(
    tree: &ScenarioTree,
    node: NodeId,
    h: &[f64],
) -> Result<QVector, TreeError> {
    let stats = tree.stats(node)?;
    let children = &tree.node(node).children;
    assert_eq!(h.len(), children.len(), "one h per child");
    let mean: f64 = children.iter().zip(h).map(|(c, &hi)| c.prob * hi).sum();
    if mean.abs() > CENTERED_TOL {
        return Err(TreeError::NotCentered { mean });
    }
    let m = tree.state_count();
    let mut w = DVector::zeros(m);
    for (c, &hi) in children.iter().zip(h) {
        w[c.state] += c.prob * hi;
    }
    let z = &stats.psi_pinv * w;
    Ok(QVector::canonical(stats, z))
}

/// Both seminorms of `z` at a node: `(sqrt(z* psi z), sqrt(z* psi_pinv z))`.
pub fn m_norms(stats: &NodeStats, z: &DVector<f64>) -> (f64, f64) {
    (stats.m_norm(z), stats.m_plus_norm(z))
}

/// A stopping time as a per-node stop/continue flag; terminal nodes always
/// stop, so every path stops. The stopping node of a path is its first
/// flagged node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoppingTime {
    stop: Vec<bool>,
}

impl StoppingTime {
    /// The rule that never stops early.
    pub fn at_horizon(tree: &ScenarioTree) -> Self {
        StoppingTime {
            stop: tree.ids().map(|n| tree.is_terminal(n)).collect(),
        }
    }

    pub fn from_flags(tree: &ScenarioTree, mut stop: Vec<bool>) -> Self {
        assert_eq!(stop.len(), tree.node_count());
        for n in tree.ids() {
            if tree.is_terminal(n) {
                stop[n.0] = true;
            }
        }
        StoppingTime { stop }
    }

    pub fn stops_at(&self, id: NodeId) -> bool {
        self.stop[id.0]
    }

    pub fn set_stop(&mut self, id: NodeId, stop: bool) {
        self.stop[id.0] = stop;
    }

    /// First flagged node on the root-to-leaf path ending at `leaf`.
    pub fn stop_node_on_path(&self, tree: &ScenarioTree, leaf: NodeId) -> NodeId {
        for n in tree.path_to(leaf) {
            if self.stop[n.0] {
                return n;
            }
        }
        leaf
    }

    /// True when `self` stops no later than `other` on every path.
    pub fn dominated_by(&self, tree: &ScenarioTree, other: &StoppingTime) -> bool {
        tree.leaves().all(|leaf| {
            let a = self.stop_node_on_path(tree, leaf);
            let b = other.stop_node_on_path(tree, leaf);
            tree.node(a).time <= tree.node(b).time
        })
    }
}

/// Pathwise evaluation of an adapted process at a stopping time.
#[derive(Clone, Debug)]
pub struct StopEval {
    /// One entry per leaf: `(leaf, stopping node, value, path probability)`.
    pub per_path: Vec<(NodeId, NodeId, f64, f64)>,
    pub expectation: f64,
}

/// Evaluates `process` at the stopping node of each root-to-leaf path and
/// its expectation under the tree's reference law.
pub fn stop_time_eval(
    tree: &ScenarioTree,
    process: &AdaptedProcess,
    tau: &StoppingTime,
) -> Result<StopEval, TreeError> {
    if tau.stop.len() != tree.node_count() {
        return Err(TreeError::InvalidStoppingTime(format!(
            "{} flags for {} nodes",
            tau.stop.len(),
            tree.node_count()
        )));
    }
    for leaf in tree.leaves() {
        if !tau.stop[leaf.0] {
            return Err(TreeError::InvalidStoppingTime(format!(
                "terminal node {} is not flagged stop",
                tree.node(leaf).label
            )));
        }
    }
    let mut per_path = Vec::new();
    let mut expectation = 0.0;
    for leaf in tree.leaves() {
        let stop = tau.stop_node_on_path(tree, leaf);
        let value = process.get(stop);
        let prob = tree.path_prob(leaf);
        expectation += prob * value;
        per_path.push((leaf, stop, value, prob));
    }
    Ok(StopEval {
        per_path,
        expectation,
    })
}

/// Enumerates every stopping rule on the subtree rooted at `node` (a rule
/// either stops at a node or continues into an independently chosen rule in
/// each child subtree). Returns `None` when the subtree has more than
/// `max_decision_nodes` non-terminal nodes.
pub fn enumerate_stopping_times(
    tree: &ScenarioTree,
    node: NodeId,
    max_decision_nodes: usize,
) -> Option<Vec<StoppingTime>> {
    let decision_nodes = tree
        .subtree(node)
        .iter()
        .filter(|&&n| !tree.is_terminal(n))
        .count();
    if decision_nodes > max_decision_nodes {
        return None;
    }
    fn rules(tree: &ScenarioTree, n: NodeId) -> Vec<Vec<(NodeId, bool)>> {
        if tree.is_terminal(n) {
            return vec![vec![(n, true)]];
        }
        let mut out = vec![vec![(n, true)]];
        // continue here: cartesian product of child rules
        let mut combos: Vec<Vec<(NodeId, bool)>> = vec![vec![(n, false)]];
        for c in &tree.node(n).children {
            let child_rules = rules(tree, c.node);
            let mut next = Vec::with_capacity(combos.len() * child_rules.len());
            for base in &combos {
                for cr in &child_rules {
                    let mut v = base.clone();
                    v.extend(cr.iter().cloned());
                    next.push(v);
                }
            }
            combos = next;
        }
        out.extend(combos);
        out
    }
    let mut result = Vec::new();
    for assignment in rules(tree, node) {
        let mut stop = vec![false; tree.node_count()];
        for (n, s) in assignment {
            stop[n.0] = s;
        }
        result.push(StoppingTime::from_flags(tree, stop));
    }
    Some(result)
}
