use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum number of paths [`path_kl_bruteforce`] will enumerate.
pub const ENUMERATION_GUARD: usize = 10_000_000;

const POWER_ITERATIONS: usize = 200_000;

/// Finite-state, irreducible, row-stochastic chain with its stationary law.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain<T> {
    n: usize,
    transition: Vec<T>,
    stationary: Vec<T>,
    labels: Vec<String>,
}

/// JSON description of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub states: Vec<String>,
    pub transition: Vec<Vec<f64>>,
}

fn row_tolerance<T: Scalar>(n: usize) -> f64 {
    1e-12_f64.max(16.0 * n as f64 * T::epsilon().f64())
}

fn stationary_tolerance<T: Scalar>(n: usize) -> f64 {
    1e-10_f64.max(64.0 * n as f64 * T::epsilon().f64())
}

impl<T: Scalar> MarkovChain<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let labels = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::with_labels(rows, labels)
    }

    pub fn with_labels(rows: Vec<Vec<T>>, labels: Vec<String>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidChain("no states".into()));
        }
        if labels.len() != n {
            return Err(Error::InvalidChain(format!(
                "{} labels for {n} states",
                labels.len()
            )));
        }
        let mut transition = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidChain(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite() || *x < T::zero()) {
                return Err(Error::InvalidChain(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().map(|x| x.f64()).sum();
            if (sum - 1.0).abs() > row_tolerance::<T>(n) {
                return Err(Error::InvalidChain(format!("row {i} sums to {sum}")));
            }
            transition.extend_from_slice(row);
        }
        let stationary = stationary_distribution_of(&transition, n)?;
        Ok(MarkovChain {
            n,
            transition,
            stationary,
            labels,
        })
    }

    /// Chain whose rows all equal `p`: an i.i.d. source.
    pub fn iid(p: &[T]) -> Result<Self> {
        Self::new(vec![p.to_vec(); p.len()])
    }

    pub fn from_spec(spec: &ChainSpec) -> Result<Self> {
        let rows = spec
            .transition
            .iter()
            .map(|r| r.iter().map(|&x| T::of(x)).collect())
            .collect();
        Self::with_labels(rows, spec.states.clone())
    }

    pub fn to_spec(&self) -> ChainSpec {
        ChainSpec {
            states: self.labels.clone(),
            transition: (0..self.n)
                .map(|i| self.row(i).iter().map(|x| x.f64()).collect())
                .collect(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ChainSpec = serde_json::from_str(s)?;
        Self::from_spec(&spec)
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn p(&self, i: usize, j: usize) -> T {
        self.transition[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.transition[i * self.n..(i + 1) * self.n]
    }

    pub fn stationary(&self) -> &[T] {
        &self.stationary
    }

    /// `max_ij |σ_i P_ij - σ_j P_ji| <= tol`.
    pub fn satisfies_detailed_balance(&self, tol: f64) -> bool {
        let s = &self.stationary;
        (0..self.n).all(|i| {
            (0..self.n).all(|j| ((s[i] * self.p(i, j)) - (s[j] * self.p(j, i))).abs().f64() <= tol)
        })
    }

    /// Draws a path of `len` states started from the stationary law.
    pub fn sample_path<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut state = draw(&self.stationary, rng);
        out.push(state);
        for _ in 1..len {
            state = draw(self.row(state), rng);
            out.push(state);
        }
        out
    }
}

fn draw<T: Scalar, R: Rng>(weights: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w.f64();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    weights.iter().rposition(|w| *w > T::zero()).unwrap_or(0)
}

/// Whether the directed graph of positive transitions is strongly connected.
fn is_irreducible<T: Scalar>(p: &[T], n: usize) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { p[i * n + j] } else { p[j * n + i] };
                if w > T::zero() && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

fn residual<T: Scalar>(s: &[T], p: &[T], n: usize) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..n {
        let mut acc = T::zero();
        for i in 0..n {
            acc += s[i] * p[i * n + j];
        }
        worst = worst.max((acc - s[j]).abs().f64());
    }
    worst
}

/// Grassmann–Taksar–Heyman elimination. Subtraction-free, so it stays
/// accurate when power iteration mixes slowly.
fn gth<T: Scalar>(p: &[T], n: usize) -> Vec<T> {
    let mut a = p.to_vec();
    for k in (1..n).rev() {
        let mut s = T::zero();
        for j in 0..k {
            s += a[k * n + j];
        }
        for i in 0..k {
            a[i * n + k] /= s;
        }
        for i in 0..k {
            let aik = a[i * n + k];
            for j in 0..k {
                let akj = a[k * n + j];
                a[i * n + j] += aik * akj;
            }
        }
    }
    let mut x = vec![T::zero(); n];
    x[0] = T::one();
    for k in 1..n {
        let mut acc = T::zero();
        for i in 0..k {
            acc += x[i] * a[i * n + k];
        }
        x[k] = acc;
    }
    let total: T = x.iter().copied().sum();
    x.iter().map(|&v| v / total).collect()
}

fn stationary_distribution_of<T: Scalar>(p: &[T], n: usize) -> Result<Vec<T>> {
    if !is_irreducible(p, n) {
        return Err(Error::Reducible);
    }
    // Power iteration on the lazy chain (P + I) / 2, which has the same
    // stationary law and is aperiodic; starts from the uniform vector.
    let half = T::of(0.5);
    let target = 1e-14_f64.max(4.0 * n as f64 * T::epsilon().f64());
    let mut s = vec![T::one() / T::of(n as f64); n];
    let mut next = vec![T::zero(); n];
    for it in 0..POWER_ITERATIONS {
        for j in 0..n {
            let mut acc = T::zero();
            for i in 0..n {
                acc += s[i] * p[i * n + j];
            }
            next[j] = half * (acc + s[j]);
        }
        let total: T = next.iter().copied().sum();
        for v in next.iter_mut() {
            *v /= total;
        }
        std::mem::swap(&mut s, &mut next);
        if it % 8 == 7 && residual(&s, p, n) <= target {
            return Ok(s);
        }
    }
    let s = gth(p, n);
    let r = residual(&s, p, n);
    if r > stationary_tolerance::<T>(n) {
        return Err(Error::InvalidChain(format!(
            "stationary solve left residual {r:e}"
        )));
    }
    Ok(s)
}

/// The unique `σ` with `σP = σ` and `Σσ = 1`.
pub fn stationary_distribution<T: Scalar>(rows: &[Vec<T>]) -> Result<Vec<T>> {
    Ok(MarkovChain::new(rows.to_vec())?.stationary)
}

/// `h = -Σ_i σ_i Σ_j P_ij ln P_ij`, with `0 ln 0 = 0`.
pub fn entropy_rate<T: Scalar>(mc: &MarkovChain<T>) -> T {
    let mut h = T::zero();
    for i in 0..mc.n {
        let mut row = T::zero();
        for &pij in mc.row(i) {
            if pij > T::zero() {
                row -= pij * pij.ln();
            }
        }
        h += mc.stationary[i] * row;
    }
    h
}

pub fn perplexity_floor<T: Scalar>(h: T) -> Result<T> {
    if h < T::zero() || h.is_nan() {
        return Err(Error::NegativeEntropy(h.f64()));
    }
    Ok(h.exp())
}

/// Time reversal: `Q_ij = σ_j P_ji / σ_i`, sharing the stationary law.
pub fn reverse_chain<T: Scalar>(mc: &MarkovChain<T>) -> MarkovChain<T> {
    let n = mc.n;
    let s = &mc.stationary;
    let mut q = vec![T::zero(); n * n];
    for i in 0..n {
        let mut sum = T::zero();
        for j in 0..n {
            let v = s[j] * mc.p(j, i) / s[i];
            q[i * n + j] = v;
            sum += v;
        }
        for j in 0..n {
            q[i * n + j] /= sum;
        }
    }
    MarkovChain {
        n,
        transition: q,
        stationary: s.clone(),
        labels: mc.labels.clone(),
    }
}

/// Entropy production rate `Σ_i σ_i Σ_j P_ij ln(P_ij / Q_ij)` in nats per
/// step, evaluated as `½ Σ_ij σ_i (P_ij - Q_ij) ln(P_ij / Q_ij)` so every term
/// is non-negative. `+∞` when some transition has no reverse transition.
pub fn time_reversal_divergence<T: Scalar>(mc: &MarkovChain<T>) -> T {
    let n = mc.n;
    for i in 0..n {
        for j in 0..n {
            if (mc.p(i, j) > T::zero()) != (mc.p(j, i) > T::zero()) {
                return T::infinity();
            }
        }
    }
    let rev = reverse_chain(mc);
    let half = T::of(0.5);
    let mut a = T::zero();
    for i in 0..n {
        let mut row = T::zero();
        for j in 0..n {
            let (pij, qij) = (mc.p(i, j), rev.p(i, j));
            if pij > T::zero() && qij > T::zero() {
                row += (pij - qij) * (pij / qij).ln();
            }
        }
        a += mc.stationary[i] * row;
    }
    half * a
}

fn check_guard(states: usize, n: usize) -> Result<()> {
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.saturating_mul(states);
        if total > ENUMERATION_GUARD {
            return Err(Error::EnumerationGuard { states, n });
        }
    }
    Ok(())
}

/// Visits every length-`n` path with its forward and reversed log-measures.
fn for_each_path<T: Scalar>(mc: &MarkovChain<T>, n: usize, f: &mut dyn FnMut(T, T)) {
    let k = mc.n;
    let mut path = vec![0usize; n];
    fn rec<T: Scalar>(
        mc: &MarkovChain<T>,
        k: usize,
        depth: usize,
        path: &mut [usize],
        log_fwd: T,
        log_rev: T,
        f: &mut dyn FnMut(T, T),
    ) {
        let n = path.len();
        if depth == n {
            let last = path[n - 1];
            f(log_fwd, log_rev + mc.stationary[last].ln());
            return;
        }
        for x in 0..k {
            path[depth] = x;
            let (lf, lr) = if depth == 0 {
                (mc.stationary[x].ln(), T::zero())
            } else {
                let prev = path[depth - 1];
                (log_fwd + mc.p(prev, x).ln(), log_rev + mc.p(x, prev).ln())
            };
            if lf == T::neg_infinity() {
                continue;
            }
            rec(mc, k, depth + 1, path, lf, lr, f);
        }
    }
    rec(mc, k, 0, &mut path, T::zero(), T::zero(), f);
}

/// `(1/n) KL(P(X_1..X_n) ‖ P^R(X_1..X_n))` by exhaustive enumeration, both
/// path measures started from `σ`.
pub fn path_kl_bruteforce<T: Scalar>(mc: &MarkovChain<T>, n: usize) -> Result<T> {
    if n == 0 {
        return Err(Error::Invalid("path length must be positive".into()));
    }
    check_guard(mc.n, n)?;
    let mut kl = T::zero();
    for_each_path(mc, n, &mut |lf, lr| {
        if lr == T::neg_infinity() {
            kl = T::infinity();
        } else {
            kl += lf.exp() * (lf - lr);
        }
    });
    Ok(kl / T::of(n as f64))
}

/// Block entropy `H(X_1..X_n)` by exhaustive enumeration.
pub fn block_entropy_bruteforce<T: Scalar>(mc: &MarkovChain<T>, n: usize) -> Result<T> {
    if n == 0 {
        return Ok(T::zero());
    }
    check_guard(mc.n, n)?;
    let mut h = T::zero();
    for_each_path(mc, n, &mut |lf, _| h -= lf.exp() * lf);
    Ok(h)
}
