//! Deterministic solvers for backward stochastic difference equations (BSDEs)
//! and reflected BSDEs on discrete-time, finite-state scenario trees.
//!
//! The probability space is an explicit rooted tree ([`tree::ScenarioTree`])
//! whose nodes carry one-step conditional laws. On top of it the crate
//! provides:
//!
//! - [`skorohod`]: the pathwise discrete Skorohod problem, the building block
//!   that identifies the reflection process of an RBSDE;
//! - [`bsde`]: backward solves with implicit one-step root-finding,
//!   g-expectations, Doob–Meyer decompositions and comparison diagnostics;
//! - [`rbsde`]: reflected solves by one-step projection, penalization
//!   cross-checks, Snell-envelope optimal stopping and minimax bounds for
//!   inf/sup-of-affine drivers;
//! - [`priors`]: time-consistent multiple-prior families (kappa-ignorance and
//!   scenario perturbations), measure changes and a brute-force robust
//!   expectation oracle;
//! - [`market`]: bond-plus-stocks markets, risk-premium polytopes, and
//!   sub/superreplication pricing of European and American claims;
//! - [`cli`]: a batch front door over JSON experiment specs with
//!   machine-readable CSV/JSON reports.
//!
//! Everything is pure and deterministic: trees are immutable after
//! construction, solvers are safe to run concurrently, and identical inputs
//! produce bit-identical outputs.

pub mod bsde;
pub mod cli;
pub mod market;
pub mod priors;
pub mod rbsde;
pub mod skorohod;
pub mod tree;

pub use bsde::{solve_bsde, BsdeSolution, Driver};
pub use rbsde::{solve_rbsde, RbsdeSolution};
pub use tree::{AdaptedProcess, NodeId, ScenarioTree, StoppingTime};
