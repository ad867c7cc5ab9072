//! The deterministic discrete-time Skorohod problem: decompose a path into a
//! nonnegative part plus a minimal increasing pushing process with
//! complementarity. This is the pathwise mechanism behind the reflection
//! process of an RBSDE.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum SkorohodError {
    #[error("y(0) = {0} is negative")]
    NegativeStart(f64),
}

/// Solution pair `(v, g)` with `v = y + g >= 0`, `g` nondecreasing from 0 and
/// `v(t) (g(t) - g(t-1)) = 0` term by term.
#[derive(Clone, Debug, PartialEq)]
pub struct SkorohodSolution {
    pub v: Vec<f64>,
    pub g: Vec<f64>,
}

/// Solves the Skorohod problem for `y` on `{0..T}` with `y(0) >= 0` via the
/// closed form `g(t) = max_{s<=t} max(-y(s), 0)`. The output is exact for
/// exact inputs: only negation, max and one addition are used.
pub fn solve_skorohod(y: &[f64]) -> Result<SkorohodSolution, SkorohodError> {
    assert!(!y.is_empty(), "need at least y(0)");
    if y[0] < 0.0 {
        return Err(SkorohodError::NegativeStart(y[0]));
    }
    let mut g = Vec::with_capacity(y.len());
    let mut running = 0.0_f64;
    for &yt in y {
        running = running.max((-yt).max(0.0));
        g.push(running);
    }
    let v = y.iter().zip(&g).map(|(yt, gt)| yt + gt).collect();
    Ok(SkorohodSolution { v, g })
}

impl SkorohodSolution {
    /// Maximum violation over the four defining properties; zero for solver
    /// output on exact inputs.
    pub fn max_violation(&self, y: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for t in 0..y.len() {
            worst = worst.max((self.v[t] - y[t] - self.g[t]).abs());
            worst = worst.max(-self.v[t]);
            if t > 0 {
                worst = worst.max(self.g[t - 1] - self.g[t]);
                worst = worst.max((self.v[t] * (self.g[t] - self.g[t - 1])).abs());
            }
        }
        worst = worst.max(self.g[0].abs());
        worst
    }
}
