//! Bond-plus-stocks markets on a scenario tree and sub/superreplication
//! pricing of European and American claims.
//!
//! The risk-premium polytope at a node collects the Q-vector drifts `theta`
//! with `sigma theta = r 1 - b` and `0 <= p + theta <= 1`: exactly the
//! one-step martingale-measure tilts for the discounted assets. Replication
//! bounds are BSDE/RBSDE solves with the drivers
//! `-r y + inf_theta z*theta` (sub) and `-r y + sup_theta z*theta` (super);
//! linear programs over the polytope are solved exactly on the enumerated
//! vertex list.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::bsde::{BsdeError, BsdeSolution, Driver, PerNode};
use crate::priors::OptDirection;
use crate::rbsde::{optimal_stopping, solve_rbsde, RbsdeError, RbsdeSolution};
use crate::tree::{sym_pinv, AdaptedProcess, NodeId, ScenarioTree, StoppingTime, TreeError};

/// Feasibility slack for polytope membership and vertex dedup.
const FEAS_TOL: f64 = 1e-9;
/// Cap on basic-solution combinations enumerated per node.
const COMBINATION_CAP: usize = 200_000;

#[derive(Error, Debug)]
pub enum MarketError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error(transparent)]
    Rbsde(#[from] RbsdeError),
    #[error("no risk premium at node {node}: {reason}")]
    EmptyPolytope { node: String, reason: String },
    #[error("asset {asset} price {price} not positive at node {node}")]
    NegativePrice {
        node: String,
        asset: usize,
        price: f64,
    },
    #[error("market is not complete: {0}")]
    NotComplete(String),
    #[error("polytope at node {node} needs {combinations} basic solutions, above the cap")]
    PolytopeTooComplex { node: String, combinations: usize },
    #[error("invalid market spec: {0}")]
    BadSpec(String),
}

/// Market primitives: short rate, appreciation rates and volatility rows per
/// node (predictable: the value stored on a node drives the step out of it).
#[derive(Clone, Debug)]
pub struct AssetSpec {
    pub s0: f64,
    pub b: PerNode<f64>,
    pub sigma: PerNode<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct MarketSpec {
    pub r: PerNode<f64>,
    pub assets: Vec<AssetSpec>,
}

/// The affine polytope of risk premia at one node, with its enumerated
/// vertex list (exact: the set is a bounded polyhedron, so linear programs
/// attain their optimum at a vertex).
#[derive(Clone, Debug)]
pub struct ThetaPolytope {
    /// Minimum-norm solution of the equality system.
    pub particular: DVector<f64>,
    /// Orthonormal basis of the feasible directions.
    pub basis: Vec<DVector<f64>>,
    pub vertices: Vec<DVector<f64>>,
}

impl ThetaPolytope {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn is_singleton(&self) -> bool {
        self.vertices.len() == 1
    }
}

/// A built market: materialized prices and per-node premium polytopes.
pub struct Market<'t> {
    tree: &'t ScenarioTree,
    spec: MarketSpec,
    /// Riskless account, starting at 1.
    pub bond: AdaptedProcess,
    /// One price process per risky asset.
    pub prices: Vec<AdaptedProcess>,
    /// Premium polytope per non-terminal node.
    pub polytopes: Vec<Option<ThetaPolytope>>,
    /// Worst martingale residual of discounted assets over all vertices.
    pub martingale_residual: f64,
}

impl<'t> Market<'t> {
    pub fn tree(&self) -> &'t ScenarioTree {
        self.tree
    }

    pub fn rate(&self, node: NodeId) -> f64 {
        *self.spec.r.at(node)
    }

    pub fn asset_count(&self) -> usize {
        self.spec.assets.len()
    }

    pub fn appreciation(&self, node: NodeId, asset: usize) -> f64 {
        *self.spec.assets[asset].b.at(node)
    }

    pub fn volatility(&self, node: NodeId, asset: usize) -> &DVector<f64> {
        self.spec.assets[asset].sigma.at(node)
    }

    pub fn polytope(&self, node: NodeId) -> Result<&ThetaPolytope, MarketError> {
        self.polytopes[node.index()]
            .as_ref()
            .ok_or_else(|| MarketError::Tree(TreeError::TerminalNode {
                node: self.tree.node(node).label.clone(),
            }))
    }
}

fn combinations(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    fn go(start: usize, n: usize, left: usize, acc: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
        if left == 0 {
            visit(acc);
            return;
        }
        for i in start..=n.saturating_sub(left) {
            acc.push(i);
            go(i + 1, n, left - 1, acc, visit);
            acc.pop();
        }
    }
    let mut acc = Vec::with_capacity(k);
    go(0, n, k, &mut acc, &mut visit);
}

fn n_choose_k(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut out = 1usize;
    for i in 0..k {
        out = out.saturating_mul(n - i) / (i + 1);
    }
    out
}

/// Enumerates the vertices of `{theta : A theta = rhs, lo <= theta <= hi}`
/// by basic solutions in the null-space coordinates.
fn enumerate_polytope(
    tree: &ScenarioTree,
    node: NodeId,
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    free: &[usize],
) -> Result<ThetaPolytope, MarketError> {
    let label = || tree.node(node).label.clone();
    let m = a.ncols();
    // minimum-norm particular solution and null basis via the normal matrix
    let ata = a.transpose() * a;
    let pinv = sym_pinv(&ata);
    let particular = &pinv * (a.transpose() * rhs);
    let residual = (a * &particular - rhs).amax();
    if residual > FEAS_TOL {
        return Err(MarketError::EmptyPolytope {
            node: label(),
            reason: format!("equality system inconsistent (residual {residual:.2e})"),
        });
    }
    let eig = ata.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = 1e-12 * lam_max.max(1.0);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for k in 0..m {
        if eig.eigenvalues[k].abs() <= cutoff {
            basis.push(eig.eigenvectors.column(k).into_owned());
        }
    }
    let d = basis.len();

    // box constraints in null-space coordinates: G s <= h
    let mut g_rows: Vec<DVector<f64>> = Vec::new();
    let mut h_vals: Vec<f64> = Vec::new();
    for &i in free {
        let row = DVector::from_fn(d, |j, _| basis[j][i]);
        g_rows.push(row.clone());
        h_vals.push(hi[i] - particular[i]);
        g_rows.push(-row);
        h_vals.push(particular[i] - lo[i]);
    }

    let feasible = |s: &DVector<f64>| -> bool {
        g_rows
            .iter()
            .zip(&h_vals)
            .all(|(row, &h)| row.dot(s) <= h + FEAS_TOL)
    };

    let mut vertices: Vec<DVector<f64>> = Vec::new();
    let mut push_vertex = |theta: DVector<f64>| {
        if !vertices
            .iter()
            .any(|v: &DVector<f64>| (v - &theta).amax() <= FEAS_TOL)
        {
            vertices.push(theta);
        }
    };

    if d == 0 {
        if feasible(&DVector::zeros(0)) {
            push_vertex(particular.clone());
        }
    } else {
        let total = n_choose_k(g_rows.len(), d);
        if total > COMBINATION_CAP {
            return Err(MarketError::PolytopeTooComplex {
                node: label(),
                combinations: total,
            });
        }
        combinations(g_rows.len(), d, |idx| {
            let gs = DMatrix::from_fn(d, d, |r, c| g_rows[idx[r]][c]);
            let hs = DVector::from_fn(d, |r, _| h_vals[idx[r]]);
            if let Some(s) = gs.lu().solve(&hs) {
                // reject ill-conditioned intersections: verify the solve
                let back = DMatrix::from_fn(d, d, |r, c| g_rows[idx[r]][c]) * &s;
                if (back - &hs).amax() <= FEAS_TOL && feasible(&s) {
                    let mut theta = particular.clone();
                    for (b, &sj) in basis.iter().zip(s.iter()) {
                        theta += b * sj;
                    }
                    push_vertex(theta);
                }
            }
        });
    }

    if vertices.is_empty() {
        return Err(MarketError::EmptyPolytope {
            node: label(),
            reason: "box constraints infeasible (one-step arbitrage)".into(),
        });
    }
    // clean structural zeros off the support
    for v in vertices.iter_mut() {
        for i in 0..m {
            if !free.contains(&i) && v[i].abs() < 1e-12 {
                v[i] = 0.0;
            }
        }
    }
    Ok(ThetaPolytope {
        particular,
        basis,
        vertices,
    })
}

/// Builds the market: validates the spec, materializes bond and asset prices
/// pathwise, enumerates the premium polytope per node and verifies that
/// every vertex turns the discounted assets into one-step martingales.
pub fn build_market<'t>(
    tree: &'t ScenarioTree,
    spec: MarketSpec,
) -> Result<Market<'t>, MarketError> {
    let m = tree.state_count();
    if spec.assets.is_empty() {
        return Err(MarketError::BadSpec("at least one risky asset".into()));
    }
    for node in tree.non_terminal() {
        if 1.0 + *spec.r.at(node) <= FEAS_TOL {
            return Err(MarketError::BadSpec(format!(
                "rate {} at node {} is not above -1",
                spec.r.at(node),
                tree.node(node).label
            )));
        }
        for (a, asset) in spec.assets.iter().enumerate() {
            if asset.sigma.at(node).len() != m {
                return Err(MarketError::BadSpec(format!(
                    "asset {a} volatility row has {} entries, expected {m}",
                    asset.sigma.at(node).len()
                )));
            }
        }
    }

    // prices
    let mut bond = AdaptedProcess::zeros(tree);
    bond.set(tree.root(), 1.0);
    let mut prices: Vec<AdaptedProcess> = spec
        .assets
        .iter()
        .map(|asset| {
            let mut p = AdaptedProcess::zeros(tree);
            p.set(tree.root(), asset.s0);
            p
        })
        .collect();
    let mut order: Vec<NodeId> = tree.ids().collect();
    order.sort_by_key(|&n| (tree.node(n).time, n.index()));
    for node in order {
        if tree.is_terminal(node) {
            continue;
        }
        let r = *spec.r.at(node);
        for (k, c) in tree.node(node).children.iter().enumerate() {
            bond.set(c.node, bond.get(node) * (1.0 + r));
            let m_inc = tree.m_increment(node, k)?;
            for (a, asset) in spec.assets.iter().enumerate() {
                let factor = 1.0 + *asset.b.at(node) + asset.sigma.at(node).dot(&m_inc);
                let price = prices[a].get(node) * factor;
                if price <= 0.0 {
                    return Err(MarketError::NegativePrice {
                        node: tree.node(c.node).label.clone(),
                        asset: a,
                        price,
                    });
                }
                prices[a].set(c.node, price);
            }
        }
    }

    // premium polytopes
    let k_assets = spec.assets.len();
    let mut polytopes: Vec<Option<ThetaPolytope>> = vec![None; tree.node_count()];
    for node in tree.non_terminal() {
        let stats = tree.stats(node)?;
        let off_support: Vec<usize> = (0..m).filter(|i| !stats.support.contains(i)).collect();
        let rows = 1 + off_support.len() + k_assets;
        let mut a = DMatrix::zeros(rows, m);
        let mut rhs = DVector::zeros(rows);
        for j in 0..m {
            a[(0, j)] = 1.0;
        }
        for (r_idx, &j) in off_support.iter().enumerate() {
            a[(1 + r_idx, j)] = 1.0;
        }
        let r = *spec.r.at(node);
        for (ai, asset) in spec.assets.iter().enumerate() {
            let row = 1 + off_support.len() + ai;
            let sigma = asset.sigma.at(node);
            for j in 0..m {
                a[(row, j)] = sigma[j];
            }
            rhs[row] = r - *asset.b.at(node);
        }
        let mut lo = vec![0.0; m];
        let mut hi = vec![0.0; m];
        for &i in &stats.support {
            lo[i] = -stats.p[i];
            hi[i] = 1.0 - stats.p[i];
        }
        let poly = enumerate_polytope(tree, node, &a, &rhs, &lo, &hi, &stats.support)?;
        polytopes[node.index()] = Some(poly);
    }

    // martingale check at every vertex
    let mut worst = 0.0_f64;
    for node in tree.non_terminal() {
        let stats = tree.stats(node)?;
        let r = *spec.r.at(node);
        for theta in &polytopes[node.index()].as_ref().unwrap().vertices {
            for (a, price) in prices.iter().enumerate() {
                let s = price.get(node);
                let mut drift = -s * r;
                for c in &tree.node(node).children {
                    let q = stats.p[c.state] + theta[c.state];
                    drift += q * (price.get(c.node) - s);
                }
                worst = worst.max(drift.abs() / s.abs().max(1.0));
                let _ = a;
            }
        }
    }

    Ok(Market {
        tree,
        spec,
        bond,
        prices,
        polytopes,
        martingale_residual: worst,
    })
}

/// Exact linear program `opt z*theta` over the premium polytope at a node:
/// the optimum over the cached vertex list, returned with its argopt vertex.
pub fn theta_extremes(
    market: &Market<'_>,
    node: NodeId,
    z: &DVector<f64>,
    mode: OptDirection,
) -> Result<(f64, DVector<f64>), MarketError> {
    let poly = market.polytope(node)?;
    let mut best_val = match mode {
        OptDirection::Inf => f64::INFINITY,
        OptDirection::Sup => f64::NEG_INFINITY,
    };
    let mut best = &poly.vertices[0];
    for v in &poly.vertices {
        let val = z.dot(v);
        let better = match mode {
            OptDirection::Inf => val < best_val,
            OptDirection::Sup => val > best_val,
        };
        if better {
            best_val = val;
            best = v;
        }
    }
    Ok((best_val, best.clone()))
}

/// Pricing driver `f(t, y, z) = -r_t y + opt_theta z*theta`.
pub struct MarketDriver<'m, 't> {
    pub market: &'m Market<'t>,
    pub mode: OptDirection,
}

impl Driver for MarketDriver<'_, '_> {
    fn eval(&self, _tree: &ScenarioTree, node: NodeId, y: f64, z: &DVector<f64>) -> f64 {
        let (opt, _) = theta_extremes(self.market, node, z, self.mode).expect("built polytope");
        -self.market.rate(node) * y + opt
    }

    fn solve_implicit(
        &self,
        _tree: &ScenarioTree,
        node: NodeId,
        z: &DVector<f64>,
        target: f64,
    ) -> Option<f64> {
        let (opt, _) = theta_extremes(self.market, node, z, self.mode).ok()?;
        Some((target + opt) / (1.0 + self.market.rate(node)))
    }

    fn is_normalised(&self) -> bool {
        false
    }
}

/// Claim payoff rule on the market's assets.
#[derive(Clone, Debug)]
pub enum PayoffSpec {
    Call { asset: usize, strike: f64 },
    Put { asset: usize, strike: f64 },
    /// Arbitrary per-node values.
    Table(AdaptedProcess),
}

impl PayoffSpec {
    pub fn intrinsic(&self, market: &Market<'_>, node: NodeId) -> f64 {
        match self {
            PayoffSpec::Call { asset, strike } => {
                (market.prices[*asset].get(node) - strike).max(0.0)
            }
            PayoffSpec::Put { asset, strike } => {
                (strike - market.prices[*asset].get(node)).max(0.0)
            }
            PayoffSpec::Table(values) => values.get(node),
        }
    }

    /// Intrinsic value at every node.
    pub fn process(&self, market: &Market<'_>) -> AdaptedProcess {
        AdaptedProcess::from_fn(market.tree(), |n| self.intrinsic(market, n))
    }
}

/// Sub- and superreplication prices of a European claim.
pub struct EuropeanBounds {
    pub sub: BsdeSolution,
    pub super_: BsdeSolution,
}

/// Prices a European claim by two BSDE solves; `sub.y <= super_.y`
/// everywhere, with equality in complete markets.
pub fn price_european_bounds(
    market: &Market<'_>,
    payoff_leaves: &AdaptedProcess,
) -> Result<EuropeanBounds, MarketError> {
    let tree = market.tree();
    let sub = crate::bsde::solve_bsde(
        tree,
        payoff_leaves,
        &MarketDriver {
            market,
            mode: OptDirection::Inf,
        },
    )?;
    let super_ = crate::bsde::solve_bsde(
        tree,
        payoff_leaves,
        &MarketDriver {
            market,
            mode: OptDirection::Sup,
        },
    )?;
    Ok(EuropeanBounds { sub, super_ })
}

/// Independent European pricing oracle: per-node optimization over polytope
/// vertices of the discounted one-step expectation. Equals the opt over all
/// vertex selections by per-node decomposability.
pub fn european_bounds_oracle(
    market: &Market<'_>,
    payoff_leaves: &AdaptedProcess,
    mode: OptDirection,
) -> Result<AdaptedProcess, MarketError> {
    let tree = market.tree();
    let mut v = AdaptedProcess::zeros(tree);
    for leaf in tree.leaves() {
        v.set(leaf, payoff_leaves.get(leaf));
    }
    for node in tree.backward_order() {
        let stats = tree.stats(node)?;
        let poly = market.polytope(node)?;
        let mut best = match mode {
            OptDirection::Inf => f64::INFINITY,
            OptDirection::Sup => f64::NEG_INFINITY,
        };
        for theta in &poly.vertices {
            let mut e = 0.0;
            for c in &tree.node(node).children {
                e += (stats.p[c.state] + theta[c.state]) * v.get(c.node);
            }
            best = match mode {
                OptDirection::Inf => best.min(e),
                OptDirection::Sup => best.max(e),
            };
        }
        v.set(node, best / (1.0 + market.rate(node)));
    }
    Ok(v)
}

/// Sub- and superreplication of an American claim, with the holder's
/// exercise rule extracted from the subreplication solution.
pub struct AmericanBounds {
    pub sub: RbsdeSolution,
    pub super_: RbsdeSolution,
    pub exercise: StoppingTime,
}

/// Prices an American claim by two reflected solves with the payoff process
/// as obstacle and terminal condition.
pub fn price_american_bounds(
    market: &Market<'_>,
    payoffs: &AdaptedProcess,
) -> Result<AmericanBounds, MarketError> {
    let tree = market.tree();
    let sub = solve_rbsde(
        tree,
        payoffs,
        &MarketDriver {
            market,
            mode: OptDirection::Inf,
        },
        Some(payoffs),
    )?;
    let super_ = solve_rbsde(
        tree,
        payoffs,
        &MarketDriver {
            market,
            mode: OptDirection::Sup,
        },
        Some(payoffs),
    )?;
    let exercise = optimal_stopping(
        tree,
        &sub,
        payoffs,
        &MarketDriver {
            market,
            mode: OptDirection::Inf,
        },
        Some(payoffs),
        tree.root(),
        0, // rule extraction only; oracles run in tests
    )
    .rule;
    Ok(AmericanBounds {
        sub,
        super_,
        exercise,
    })
}

/// American price under one fixed per-node vertex choice: the classical
/// discounted Snell recursion under the tilted law.
pub fn american_fixed_theta_price(
    market: &Market<'_>,
    payoffs: &AdaptedProcess,
    theta_of: impl Fn(NodeId) -> DVector<f64>,
) -> Result<AdaptedProcess, MarketError> {
    let tree = market.tree();
    let mut v = AdaptedProcess::zeros(tree);
    for leaf in tree.leaves() {
        v.set(leaf, payoffs.get(leaf));
    }
    for node in tree.backward_order() {
        let stats = tree.stats(node)?;
        let theta = theta_of(node);
        let mut e = 0.0;
        for c in &tree.node(node).children {
            e += (stats.p[c.state] + theta[c.state]) * v.get(c.node);
        }
        v.set(node, payoffs.get(node).max(e / (1.0 + market.rate(node))));
    }
    Ok(v)
}

/// Classical binomial backward induction, usable only on complete one-stock
/// binary markets; an independent check of the replication-bound solvers.
pub fn crr_oracle(
    market: &Market<'_>,
    payoff: &PayoffSpec,
    american: bool,
) -> Result<f64, MarketError> {
    let tree = market.tree();
    if market.asset_count() != 1 {
        return Err(MarketError::NotComplete(format!(
            "{} risky assets, expected 1",
            market.asset_count()
        )));
    }
    let mut v = AdaptedProcess::zeros(tree);
    for leaf in tree.leaves() {
        v.set(leaf, payoff.intrinsic(market, leaf));
    }
    for node in tree.backward_order() {
        let poly = market.polytope(node)?;
        if !poly.is_singleton() {
            return Err(MarketError::NotComplete(format!(
                "polytope at node {} has {} vertices",
                tree.node(node).label,
                poly.vertices.len()
            )));
        }
        let support_children: Vec<&crate::tree::ChildEdge> = tree
            .node(node)
            .children
            .iter()
            .filter(|c| c.prob > 0.0)
            .collect();
        if support_children.len() != 2 {
            return Err(MarketError::NotComplete(format!(
                "node {} has {} possible successors, expected 2",
                tree.node(node).label,
                support_children.len()
            )));
        }
        // classical q from the two gross returns, independent of the polytope
        let s = market.prices[0].get(node);
        let (up, down) = (support_children[0], support_children[1]);
        let (su, sd) = (market.prices[0].get(up.node), market.prices[0].get(down.node));
        let r = market.rate(node);
        let q = ((1.0 + r) * s - sd) / (su - sd);
        let cont = (q * v.get(up.node) + (1.0 - q) * v.get(down.node)) / (1.0 + r);
        let value = if american {
            cont.max(payoff.intrinsic(market, node))
        } else {
            cont
        };
        v.set(node, value);
    }
    Ok(v.get(tree.root()))
}

/// Portfolio implied by a solution's `Z` at one node, when the defining
/// relation `sigma* (H . S) = Z` has a solution.
#[derive(Clone, Debug)]
pub enum PortfolioRecovery {
    Identified {
        /// Units of the riskless account.
        bond_units: f64,
        /// Shares per risky asset.
        holdings: Vec<f64>,
    },
    /// `sigma sigma*` singular, or `Z` outside the row space of `sigma`:
    /// no portfolio generates this exposure.
    NonIdentifiable { reason: String },
}

/// Recovers the hedge at a node from the solution value `y` and exposure
/// `z`: solves `sigma* w = z` for the dollar positions `w`, splits into
/// shares, and puts the remainder in the bond.
pub fn recover_portfolio(
    market: &Market<'_>,
    node: NodeId,
    y: f64,
    z: &DVector<f64>,
) -> PortfolioRecovery {
    let k = market.asset_count();
    let m = market.tree().state_count();
    let sigma = DMatrix::from_fn(k, m, |a, j| market.volatility(node, a)[j]);
    let gram = &sigma * sigma.transpose();
    let inv = match gram.clone().try_inverse() {
        Some(inv) => inv,
        None => {
            return PortfolioRecovery::NonIdentifiable {
                reason: "sigma sigma* is singular".into(),
            }
        }
    };
    let w = inv * (&sigma * z);
    let back = sigma.transpose() * &w;
    let residual = (back - z).amax();
    if residual > FEAS_TOL * (1.0 + z.amax()) {
        return PortfolioRecovery::NonIdentifiable {
            reason: format!("z outside the volatility row space (residual {residual:.2e})"),
        };
    }
    let holdings: Vec<f64> = (0..k)
        .map(|a| w[a] / market.prices[a].get(node))
        .collect();
    let invested: f64 = w.iter().sum();
    let bond_units = (y - invested) / market.bond.get(node);
    PortfolioRecovery::Identified {
        bond_units,
        holdings,
    }
}

/// Self-financing identity residual per node for a superreplication
/// solution: `V_{t+1} - V_t = <H, S_{t+1} - S_t> - dK` along every support
/// edge, for the portfolio recovered from `Z`. `None` marks nodes where no
/// portfolio generates the exposure.
pub fn super_strategy_residuals(
    market: &Market<'_>,
    sol: &RbsdeSolution,
) -> Vec<(NodeId, Option<f64>)> {
    let tree = market.tree();
    let mut out = Vec::new();
    for node in tree.non_terminal() {
        let recovery = recover_portfolio(market, node, sol.y.get(node), sol.z_at(node));
        let entry = match recovery {
            PortfolioRecovery::NonIdentifiable { .. } => None,
            PortfolioRecovery::Identified {
                bond_units,
                holdings,
            } => {
                let mut worst = 0.0_f64;
                for c in tree.node(node).children.iter().filter(|c| c.prob > 0.0) {
                    let dv = sol.y.get(c.node) - sol.y.get(node);
                    let mut gain =
                        bond_units * (market.bond.get(c.node) - market.bond.get(node));
                    for (a, h) in holdings.iter().enumerate() {
                        gain += h * (market.prices[a].get(c.node) - market.prices[a].get(node));
                    }
                    worst = worst.max((dv - gain + sol.dk_at(node)).abs());
                }
                Some(worst)
            }
        };
        out.push((node, entry));
    }
    out
}

// ---------------------------------------------------------------------------
// JSON-facing market description
// ---------------------------------------------------------------------------

/// A scalar market parameter: one number or a per-node map keyed by label.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamJson {
    Constant(f64),
    ByLabel(BTreeMap<String, f64>),
}

impl ParamJson {
    pub fn resolve(&self, tree: &ScenarioTree, what: &str) -> Result<PerNode<f64>, MarketError> {
        match self {
            ParamJson::Constant(v) => Ok(PerNode::Constant(*v)),
            ParamJson::ByLabel(map) => {
                let mut values = vec![0.0; tree.node_count()];
                for node in tree.non_terminal() {
                    let label = &tree.node(node).label;
                    let v = map.get(label).ok_or_else(|| {
                        MarketError::BadSpec(format!("{what}: no value for node {label}"))
                    })?;
                    values[node.index()] = *v;
                }
                Ok(PerNode::ByNode(values))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssetJson {
    pub s0: f64,
    pub b: ParamJson,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClaimJson {
    #[serde(rename = "type")]
    pub kind: String,
    pub payoff: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    #[serde(default)]
    pub asset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarketJson {
    pub r: ParamJson,
    pub assets: Vec<AssetJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim: Option<ClaimJson>,
}

impl MarketJson {
    pub fn resolve_spec(&self, tree: &ScenarioTree) -> Result<MarketSpec, MarketError> {
        let r = self.r.resolve(tree, "r")?;
        let assets = self
            .assets
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if a.s0 <= 0.0 {
                    return Err(MarketError::BadSpec(format!(
                        "asset {i}: s0 = {} not positive",
                        a.s0
                    )));
                }
                Ok(AssetSpec {
                    s0: a.s0,
                    b: a.b.resolve(tree, &format!("asset {i} b"))?,
                    sigma: PerNode::Constant(DVector::from_vec(a.sigma.clone())),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MarketSpec { r, assets })
    }
}

impl ClaimJson {
    pub fn resolve(
        &self,
        market: &Market<'_>,
    ) -> Result<(bool, PayoffSpec), MarketError> {
        let american = match self.kind.as_str() {
            "american" => true,
            "european" => false,
            other => {
                return Err(MarketError::BadSpec(format!(
                    "claim type {other:?}, expected \"european\" or \"american\""
                )))
            }
        };
        let payoff = match self.payoff.as_str() {
            "call" => PayoffSpec::Call {
                asset: self.asset,
                strike: self.strike.ok_or_else(|| {
                    MarketError::BadSpec("call payoff needs a strike".into())
                })?,
            },
            "put" => PayoffSpec::Put {
                asset: self.asset,
                strike: self.strike.ok_or_else(|| {
                    MarketError::BadSpec("put payoff needs a strike".into())
                })?,
            },
            "table" => {
                let values = self.values.as_ref().ok_or_else(|| {
                    MarketError::BadSpec("table payoff needs per-node values".into())
                })?;
                let tree = market.tree();
                let mut table = AdaptedProcess::zeros(tree);
                for node in tree.ids() {
                    let label = &tree.node(node).label;
                    if let Some(v) = values.get(label) {
                        table.set(node, *v);
                    } else if american || tree.is_terminal(node) {
                        return Err(MarketError::BadSpec(format!(
                            "table payoff: no value for node {label}"
                        )));
                    }
                }
                PayoffSpec::Table(table)
            }
            other => {
                return Err(MarketError::BadSpec(format!(
                    "payoff {other:?}, expected call, put or table"
                )))
            }
        };
        if self.asset >= market.asset_count() {
            return Err(MarketError::BadSpec(format!(
                "claim references asset {} of {}",
                self.asset,
                market.asset_count()
            )));
        }
        Ok((american, payoff))
    }
}
