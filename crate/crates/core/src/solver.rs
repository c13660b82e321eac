//! Relaxed top-k via entropy-regularized linear programming.
//!
//! Solves
//!
//! ```text
//! max_λ  sᵀλ + ε·H(λ)   s.t.  Σλ = k,  0 ≤ λ_i ≤ 1,   H(λ) = Σ −λ_i ln λ_i
//! ```
//!
//! through its dual. With `a` the multiplier of the budget constraint and
//! `b ≤ 0` those of the upper bounds, the primal is recovered as
//! `λ_i = exp((s_i + a + b_i)/ε)`, and dual coordinate ascent alternates
//!
//! ```text
//! a' = ε ln k − ε ln Σ_i exp((s_i + b_i)/ε)
//! b'_i = min(−s_i − a', 0)
//! ```
//!
//! Every fixed point of that iteration has the form
//! `λ_i = min(1, exp((s_i + a)/ε))` with `Σλ = k`. Near ε → 0 the plain
//! iteration contracts at rate `C/k` (`C` = number of capped entries), so
//! [`SolverMethod::ActiveSet`] finds the fixed point directly: entries are
//! sorted, and the number of capped entries is the first `C` whose closed-form
//! `a` leaves every uncapped `λ_i ≤ 1`. The alternating updates are then run
//! from that point as a certificate. [`SolverMethod::CoordinateDescent`] runs
//! the plain iteration from `a = 0, b = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature used for the salience gate during training.
pub const DEFAULT_EPSILON: f64 = 0.002;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    /// Closed-form fixed point of the dual updates, certified by sweeps.
    #[default]
    ActiveSet,
    /// Alternating dual updates from `a = 0, b = 0`; gradients are taken
    /// through the unrolled iterations.
    CoordinateDescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stopping tolerance on `|Σλ − k|`.
    pub tol: f64,
    #[serde(default)]
    pub method: SolverMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_iters: 50,
            tol: 1e-6,
            method: SolverMethod::ActiveSet,
        }
    }
}

impl SolverConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverResult {
    pub lambda: Vec<f64>,
    pub dual_a: f64,
    pub dual_b: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Final `|Σλ − k|`.
    pub residual: f64,
}

fn check_inputs(s: &[f64], k: usize) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Config("score vector must be non-empty".into()));
    }
    if k == 0 || k > s.len() {
        return Err(Error::Config(format!(
            "budget k={k} outside [1, {}]",
            s.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("scores must be finite".into()));
    }
    Ok(())
}

/// Max-shifted `ln Σ exp(x_i)`.
fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// One `a` update followed by one `b` update.
fn sweep(s: &[f64], b: &mut [f64], k: usize, eps: f64) -> f64 {
    let lse = logsumexp(s.iter().zip(b.iter()).map(|(&si, &bi)| (si + bi) / eps));
    let a = eps * (k as f64).ln() - eps * lse;
    for (bi, &si) in b.iter_mut().zip(s) {
        *bi = (-si - a).min(0.0);
    }
    a
}

fn primal(s: &[f64], a: f64, b: &[f64], eps: f64) -> Vec<f64> {
    s.iter()
        .zip(b)
        .map(|(&si, &bi)| ((si + bi + a) / eps).exp())
        .collect()
}

fn residual(lambda: &[f64], k: usize) -> f64 {
    (lambda.iter().sum::<f64>() - k as f64).abs()
}

/// Exact dual `a` at the fixed point of the alternating updates.
fn active_set_dual(s: &[f64], k: usize, eps: f64) -> f64 {
    let m = s.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

    // suffix_lse[c] = ln Σ_{t ≥ c} exp(s_(t)/ε), accumulated from the tail.
    let mut suffix_lse = vec![f64::NEG_INFINITY; m];
    let mut acc = f64::NEG_INFINITY;
    for c in (0..m).rev() {
        let x = s[order[c]] / eps;
        acc = if acc == f64::NEG_INFINITY {
            x
        } else {
            let hi = acc.max(x);
            hi + ((acc - hi).exp() + (x - hi).exp()).ln()
        };
        suffix_lse[c] = acc;
    }

    // With the top `c` entries capped at 1, the remaining mass k − c is spread
    // as exp((s_i + a)/ε). The first c whose largest uncapped λ stays ≤ 1 is
    // the solution; c = k − 1 always qualifies.
    let mut a = 0.0;
    for c in 0..k {
        a = eps * ((k - c) as f64).ln() - eps * suffix_lse[c];
        if s[order[c]] + a <= 0.0 {
            break;
        }
    }
    a
}

/// Relaxed top-k gate for score vector `s` with budget `k ∈ [1, m]`.
///
/// Non-convergence is reported through [`SolverResult::converged`], not as
/// an error.
pub fn solve_relaxed_topk(s: &[f64], k: usize, config: &SolverConfig) -> Result<SolverResult> {
    config.validate()?;
    check_inputs(s, k)?;
    let eps = config.epsilon;

    match config.method {
        SolverMethod::ActiveSet if k == s.len() => {
            // Σλ = m with λ ≤ 1 forces λ = 1.
            let a = -s.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(SolverResult {
                lambda: vec![1.0; k],
                dual_a: a,
                dual_b: s.iter().map(|&si| (-si - a).min(0.0)).collect(),
                iterations_used: 0,
                converged: true,
                residual: 0.0,
            })
        }
        SolverMethod::ActiveSet => {
            let mut a = active_set_dual(s, k, eps);
            let mut b: Vec<f64> = s.iter().map(|&si| (-si - a).min(0.0)).collect();
            let mut lambda = primal(s, a, &b, eps);
            let mut res = residual(&lambda, k);
            let mut iterations = 0;
            while iterations < config.max_iters {
                let before = (a, b.clone(), lambda.clone(), res);
                a = sweep(s, &mut b, k, eps);
                lambda = primal(s, a, &b, eps);
                res = residual(&lambda, k);
                iterations += 1;
                if res > before.3 {
                    // Sweeps only move a fixed point by rounding; keep the
                    // better certificate.
                    (a, b, lambda, res) = before;
                    break;
                }
                if res <= config.tol {
                    break;
                }
            }
            Ok(SolverResult {
                lambda,
                dual_a: a,
                dual_b: b,
                iterations_used: iterations,
                converged: res <= config.tol,
                residual: res,
            })
        }
        SolverMethod::CoordinateDescent => {
            let trace = unrolled_forward(s, k, eps, config.max_iters, Some(config.tol));
            let a = *trace.a.last().unwrap();
            let b = trace.b.last().unwrap().clone();
            let lambda = primal(s, a, &b, eps);
            let res = residual(&lambda, k);
            Ok(SolverResult {
                lambda,
                dual_a: a,
                dual_b: b,
                iterations_used: trace.a.len(),
                converged: res <= config.tol,
                residual: res,
            })
        }
    }
}

struct Trace {
    a: Vec<f64>,
    b: Vec<Vec<f64>>,
}

fn unrolled_forward(s: &[f64], k: usize, eps: f64, iters: usize, tol: Option<f64>) -> Trace {
    let mut b = vec![0.0; s.len()];
    let mut trace = Trace {
        a: Vec::with_capacity(iters),
        b: Vec::with_capacity(iters),
    };
    for _ in 0..iters {
        let a = sweep(s, &mut b, k, eps);
        trace.a.push(a);
        trace.b.push(b.clone());
        if let Some(tol) = tol {
            if residual(&primal(s, a, &b, eps), k) <= tol {
                break;
            }
        }
    }
    trace
}

/// `upstreamᵀ · ∂λ/∂s`, differentiating the computation that
/// [`solve_relaxed_topk`] performs with the same configuration.
///
/// For [`SolverMethod::ActiveSet`] the map is `λ_i = min(1, exp((s_i + a)/ε))`
/// with `a` given in closed form by the active set, whose derivative is
/// `λ_i/ε · (g_i − Σ_U g_j λ_j / Σ_U λ_j)` on the uncapped set `U` and zero on
/// capped entries. For [`SolverMethod::CoordinateDescent`] it is reverse-mode
/// differentiation through the `iterations_used` unrolled updates.
pub fn vjp_relaxed_topk(
    s: &[f64],
    k: usize,
    config: &SolverConfig,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    let result = solve_relaxed_topk(s, k, config)?;
    vjp_from_result(s, k, config, &result, upstream)
}

/// Same as [`vjp_relaxed_topk`] but reuses an already computed solve.
pub fn vjp_from_result(
    s: &[f64],
    k: usize,
    config: &SolverConfig,
    result: &SolverResult,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if upstream.len() != s.len() {
        return Err(Error::Dimension {
            expected: s.len(),
            found: upstream.len(),
        });
    }
    let eps = config.epsilon;
    match config.method {
        SolverMethod::ActiveSet => {
            let lambda = &result.lambda;
            let uncapped = |i: usize| result.dual_b[i] == 0.0;
            let (mut mass, mut weighted) = (0.0, 0.0);
            for i in 0..s.len() {
                if uncapped(i) {
                    mass += lambda[i];
                    weighted += upstream[i] * lambda[i];
                }
            }
            let mean = if mass > 0.0 { weighted / mass } else { 0.0 };
            Ok((0..s.len())
                .map(|i| {
                    if uncapped(i) {
                        lambda[i] / eps * (upstream[i] - mean)
                    } else {
                        0.0
                    }
                })
                .collect())
        }
        SolverMethod::CoordinateDescent => {
            let trace = unrolled_forward(s, k, eps, result.iterations_used, None);
            Ok(unrolled_backward(s, eps, &trace, upstream))
        }
    }
}

fn unrolled_backward(s: &[f64], eps: f64, trace: &Trace, upstream: &[f64]) -> Vec<f64> {
    let m = s.len();
    let steps = trace.a.len();
    let a_last = trace.a[steps - 1];
    let b_last = &trace.b[steps - 1];

    let mut grad_s = vec![0.0; m];
    let mut grad_b = vec![0.0; m];
    let mut grad_a = 0.0;
    for i in 0..m {
        let lam = ((s[i] + b_last[i] + a_last) / eps).exp();
        let w = upstream[i] * lam / eps;
        grad_s[i] += w;
        grad_b[i] = w;
        grad_a += w;
    }

    for t in (0..steps).rev() {
        let a_t = trace.a[t];
        // b_t = min(−s − a_t, 0)
        for i in 0..m {
            if -s[i] - a_t < 0.0 {
                grad_s[i] -= grad_b[i];
                grad_a -= grad_b[i];
            }
        }
        // a_t = ε ln k − ε·LSE((s + b_{t−1})/ε); ∂a_t/∂s_i = ∂a_t/∂b_{t−1,i} = −softmax_i.
        let prev_b: Vec<f64> = if t == 0 {
            vec![0.0; m]
        } else {
            trace.b[t - 1].clone()
        };
        let z: Vec<f64> = (0..m).map(|i| (s[i] + prev_b[i]) / eps).collect();
        let lse = logsumexp(z.iter().copied());
        for i in 0..m {
            let p = (z[i] - lse).exp();
            grad_s[i] -= grad_a * p;
            grad_b[i] = -grad_a * p;
        }
        grad_a = 0.0;
    }
    grad_s
}

/// `sᵀλ + ε·Σ −λ_i ln λ_i` with `0 ln 0 = 0`.
pub fn objective(s: &[f64], lambda: &[f64], epsilon: f64) -> f64 {
    s.iter()
        .zip(lambda)
        .map(|(&si, &li)| {
            let entropy = if li > 0.0 { -li * li.ln() } else { 0.0 };
            si * li + epsilon * entropy
        })
        .sum()
}
