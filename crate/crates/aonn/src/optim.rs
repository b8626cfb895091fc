//! Full-batch minimizers for the subproblems: limited-memory BFGS and dense
//! BFGS with a strong Wolfe line search, plus Adam as a fallback.

use std::collections::VecDeque;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    LBfgs,
    DenseBfgs,
    Adam,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamOptions {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimOptions {
    pub algorithm: Algorithm,
    pub max_iterations: usize,
    /// Strong Wolfe sufficient-decrease constant.
    pub c1: f64,
    /// Strong Wolfe curvature constant.
    pub c2: f64,
    /// L-BFGS history length.
    pub memory: usize,
    pub grad_tol: f64,
    pub adam: AdamOptions,
    /// Whether to keep per-step Wolfe records (used by the certification
    /// tests; cheap either way).
    pub record_steps: bool,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::LBfgs,
            max_iterations: 100,
            c1: 1e-4,
            c2: 0.9,
            memory: 20,
            grad_tol: 1e-9,
            adam: AdamOptions::default(),
            record_steps: true,
        }
    }
}

/// Parameter count above which the dense inverse-Hessian store is refused.
pub const DENSE_BFGS_LIMIT: usize = 5000;

/// Loss/gradient oracle. Divergence inside the evaluator surfaces as an
/// error string with the offending context.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>), String>;
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), String>,
{
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>), String> {
        self(x)
    }
}

/// One accepted line-search step; both strong Wolfe inequalities are
/// checkable from these numbers.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub alpha: f64,
    pub f_before: f64,
    pub f_after: f64,
    /// Directional derivative g.d at the step start.
    pub gtd_before: f64,
    /// Directional derivative at the accepted point.
    pub gtd_after: f64,
}

impl StepRecord {
    pub fn satisfies_wolfe(&self, c1: f64, c2: f64) -> bool {
        let armijo = self.f_after <= self.f_before + c1 * self.alpha * self.gtd_before + 1e-15;
        let curvature = self.gtd_after.abs() <= c2 * self.gtd_before.abs() + 1e-15;
        armijo && curvature
    }
}

#[derive(Clone, Debug, Default)]
pub struct MinimizeStats {
    pub iterations: usize,
    pub evaluations: usize,
    pub final_loss: f64,
    pub best_loss: f64,
    pub final_grad_norm: f64,
    pub line_search_failures: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug)]
pub enum OptimError {
    NonFiniteAtStart,
    DenseTooLarge { n: usize, limit: usize },
    Evaluator { iteration: usize, message: String },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteAtStart => write!(f, "loss is non-finite at the initial point"),
            OptimError::DenseTooLarge { n, limit } => {
                write!(f, "dense BFGS refused for {n} parameters (limit {limit})")
            }
            OptimError::Evaluator { iteration, message } => {
                write!(f, "evaluator failed at iteration {iteration}: {message}")
            }
        }
    }
}

impl std::error::Error for OptimError {}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cubic interpolation of a step within [lo, hi] given values/slopes at the
/// ends; falls back to bisection when the cubic is degenerate or leaves the
/// safeguard window.
fn cubic_interpolate(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if disc >= 0.0 {
        let d2 = disc.sqrt() * (b - a).signum();
        let cand = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
        if cand.is_finite() && cand > lo && cand < hi {
            return cand;
        }
    }
    0.5 * (lo + hi)
}

struct LinePoint {
    alpha: f64,
    f: f64,
    gtd: f64,
    grad: Vec<f64>,
}

/// Strong Wolfe line search (bracket + zoom). Returns the accepted point or
/// None when no acceptable step was found within the evaluation budget.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe(
    obj: &mut dyn Objective,
    x: &[f64],
    f0: f64,
    dir: &[f64],
    gtd0: f64,
    alpha_init: f64,
    c1: f64,
    c2: f64,
    evals: &mut usize,
    iteration: usize,
) -> Result<Option<LinePoint>, OptimError> {
    debug_assert!(gtd0 < 0.0);
    let max_evals = 30usize;
    let mut used = 0usize;
    let mut probe = |alpha: f64, used: &mut usize| -> Result<LinePoint, OptimError> {
        let trial: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + alpha * di).collect();
        let (f, grad) = obj
            .eval(&trial)
            .map_err(|message| OptimError::Evaluator { iteration, message })?;
        *evals += 1;
        *used += 1;
        let gtd = dot(&grad, dir);
        Ok(LinePoint { alpha, f, gtd, grad })
    };

    let armijo = |alpha: f64, f: f64| f <= f0 + c1 * alpha * gtd0;
    let curvature = |gtd: f64| gtd.abs() <= -c2 * gtd0;

    let mut prev = LinePoint {
        alpha: 0.0,
        f: f0,
        gtd: gtd0,
        grad: Vec::new(),
    };
    let mut alpha = alpha_init.max(1e-16);
    let mut bracket: Option<(LinePoint, LinePoint)> = None;
    for i in 0..12 {
        let cur = probe(alpha, &mut used)?;
        if !cur.f.is_finite() || cur.f > f0 + c1 * alpha * gtd0 || (i > 0 && cur.f >= prev.f) {
            bracket = Some((prev, cur));
            break;
        }
        if curvature(cur.gtd) {
            return Ok(Some(cur));
        }
        if cur.gtd >= 0.0 {
            bracket = Some((cur, prev));
            break;
        }
        let next = (2.0 * alpha).min(1e10);
        prev = cur;
        alpha = next;
        if used >= max_evals {
            return Ok(None);
        }
    }
    let (mut lo, mut hi) = match bracket {
        Some(b) => b,
        None => return Ok(None),
    };
    // zoom: lo always satisfies Armijo with the lower f
    for _ in 0..25 {
        if used >= max_evals {
            break;
        }
        let width = (hi.alpha - lo.alpha).abs();
        if width <= 1e-14 * lo.alpha.abs().max(1.0) {
            break;
        }
        let mut trial_alpha = cubic_interpolate(lo.alpha, lo.f, lo.gtd, hi.alpha, hi.f, hi.gtd);
        // keep inside with a margin
        let (a_lo, a_hi) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let margin = 0.1 * (a_hi - a_lo);
        if !trial_alpha.is_finite() || trial_alpha < a_lo + margin || trial_alpha > a_hi - margin {
            trial_alpha = 0.5 * (a_lo + a_hi);
        }
        let cur = probe(trial_alpha, &mut used)?;
        if !cur.f.is_finite() || !armijo(cur.alpha, cur.f) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(cur.gtd) {
                return Ok(Some(cur));
            }
            if cur.gtd * (hi.alpha - lo.alpha) >= 0.0 {
                hi = LinePoint {
                    alpha: lo.alpha,
                    f: lo.f,
                    gtd: lo.gtd,
                    grad: std::mem::take(&mut lo.grad),
                };
            }
            lo = cur;
        }
    }
    Ok(None)
}

/// Quasi-Newton loop shared by the L-BFGS and dense BFGS variants.
fn quasi_newton(
    obj: &mut dyn Objective,
    x0: &[f64],
    opts: &OptimOptions,
    dense: bool,
) -> Result<(Vec<f64>, MinimizeStats), OptimError> {
    let n = x0.len();
    if dense && n > DENSE_BFGS_LIMIT {
        return Err(OptimError::DenseTooLarge {
            n,
            limit: DENSE_BFGS_LIMIT,
        });
    }
    let mut stats = MinimizeStats::default();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj
        .eval(&x)
        .map_err(|message| OptimError::Evaluator { iteration: 0, message })?;
    stats.evaluations = 1;
    if !f.is_finite() {
        return Err(OptimError::NonFiniteAtStart);
    }
    let mut best_f = f;
    let mut best_x = x.clone();
    stats.final_grad_norm = norm(&g);

    // L-BFGS memory / dense inverse Hessian
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut h_dense: Option<Vec<f64>> = if dense {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        Some(h)
    } else {
        None
    };
    let mut gamma = 1.0;

    for k in 0..opts.max_iterations {
        let gnorm = norm(&g);
        stats.final_grad_norm = gnorm;
        if gnorm <= opts.grad_tol {
            break;
        }
        // search direction
        let mut dir: Vec<f64> = if let Some(h) = &h_dense {
            let mut d = vec![0.0; n];
            for i in 0..n {
                d[i] = -dot(&h[i * n..(i + 1) * n], &g);
            }
            d
        } else {
            // two-loop recursion
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, rho) in history.iter().rev() {
                let a = rho * dot(s, &q);
                for (qi, yi) in q.iter_mut().zip(y) {
                    *qi -= a * yi;
                }
                alphas.push(a);
            }
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
            for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
                let b = rho * dot(y, &q);
                for (qi, si) in q.iter_mut().zip(s) {
                    *qi += (a - b) * si;
                }
            }
            q.iter_mut().for_each(|v| *v = -*v);
            q
        };
        let mut gtd = dot(&dir, &g);
        if !gtd.is_finite() || gtd >= 0.0 {
            history.clear();
            gamma = 1.0;
            dir = g.iter().map(|v| -v).collect();
            gtd = -gnorm * gnorm;
        }
        if gtd == 0.0 {
            break;
        }
        let alpha_init = if k == 0 && history.is_empty() && h_dense.is_none() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };
        let accepted = strong_wolfe(
            obj,
            &x,
            f,
            &dir,
            gtd,
            alpha_init,
            opts.c1,
            opts.c2,
            &mut stats.evaluations,
            k,
        )?;
        let point = match accepted {
            Some(p) => p,
            None => {
                stats.line_search_failures += 1;
                break;
            }
        };
        if opts.record_steps {
            stats.steps.push(StepRecord {
                alpha: point.alpha,
                f_before: f,
                f_after: point.f,
                gtd_before: gtd,
                gtd_after: point.gtd,
            });
        }
        let s: Vec<f64> = dir.iter().map(|d| point.alpha * d).collect();
        let y: Vec<f64> = point.grad.iter().zip(&g).map(|(gn, go)| gn - go).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if let Some(h) = &mut h_dense {
                // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
                let rho = 1.0 / sy;
                let mut hy = vec![0.0; n];
                for i in 0..n {
                    hy[i] = dot(&h[i * n..(i + 1) * n], &y);
                }
                let yhy = dot(&y, &hy);
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                            + rho * rho * yhy * s[i] * s[j]
                            + rho * s[i] * s[j];
                    }
                }
            } else {
                gamma = sy / dot(&y, &y);
                history.push_back((s.clone(), y, 1.0 / sy));
                while history.len() > opts.memory.max(1) {
                    history.pop_front();
                }
            }
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = point.f;
        g = point.grad;
        stats.iterations = k + 1;
        if f < best_f {
            best_f = f;
            best_x = x.clone();
        }
    }
    // return the best-seen iterate
    if best_f < f {
        x = best_x;
        f = best_f;
    }
    stats.final_loss = f;
    stats.best_loss = best_f;
    Ok((x, stats))
}

fn adam(
    obj: &mut dyn Objective,
    x0: &[f64],
    opts: &OptimOptions,
) -> Result<(Vec<f64>, MinimizeStats), OptimError> {
    let n = x0.len();
    let mut stats = MinimizeStats::default();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj
        .eval(&x)
        .map_err(|message| OptimError::Evaluator { iteration: 0, message })?;
    stats.evaluations = 1;
    if !f.is_finite() {
        return Err(OptimError::NonFiniteAtStart);
    }
    let mut best_f = f;
    let mut best_x = x.clone();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let o = &opts.adam;
    for k in 0..opts.max_iterations {
        let gnorm = norm(&g);
        stats.final_grad_norm = gnorm;
        if gnorm <= opts.grad_tol {
            break;
        }
        let t = (k + 1) as i32;
        for i in 0..n {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - o.beta1.powi(t));
            let vh = v[i] / (1.0 - o.beta2.powi(t));
            x[i] -= o.rate * mh / (vh.sqrt() + o.epsilon);
        }
        let (fk, gk) = obj
            .eval(&x)
            .map_err(|message| OptimError::Evaluator { iteration: k, message })?;
        stats.evaluations += 1;
        f = fk;
        g = gk;
        stats.iterations = k + 1;
        if f < best_f {
            best_f = f;
            best_x = x.clone();
        }
    }
    if best_f < f {
        x = best_x;
        f = best_f;
    }
    stats.final_loss = f;
    stats.best_loss = best_f;
    Ok((x, stats))
}

/// Minimize the objective from `x0`. Every accepted quasi-Newton step
/// satisfies both strong Wolfe conditions; on a line-search failure the
/// best-seen iterate is returned with the failure counted.
pub fn minimize(
    obj: &mut dyn Objective,
    x0: &[f64],
    opts: &OptimOptions,
) -> Result<(Vec<f64>, MinimizeStats), OptimError> {
    assert!(opts.c1 > 0.0 && opts.c1 < opts.c2 && opts.c2 < 1.0, "0 < c1 < c2 < 1");
    assert!(x0.iter().all(|v| v.is_finite()), "x0 must be finite");
    match opts.algorithm {
        Algorithm::LBfgs => quasi_newton(obj, x0, opts, false),
        Algorithm::DenseBfgs => quasi_newton(obj, x0, opts, true),
        Algorithm::Adam => adam(obj, x0, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>), String> {
        move |x: &[f64]| {
            let f = x
                .iter()
                .zip(&center)
                .map(|(xi, ci)| 0.5 * (xi - ci) * (xi - ci))
                .sum();
            let g = x.iter().zip(&center).map(|(xi, ci)| xi - ci).collect();
            Ok((f, g))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>), String> {
        let (a, b) = (1.0, 100.0);
        let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
        let g = vec![
            -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
            2.0 * b * (x[1] - x[0] * x[0]),
        ];
        Ok((f, g))
    }

    #[test]
    fn quadratic_converges_fast() {
        let mut obj = quadratic(vec![1.0, 2.0, 3.0]);
        let opts = OptimOptions::default();
        let (x, stats) = minimize(&mut obj, &[0.0, 0.0, 0.0], &opts).unwrap();
        let err: f64 = x
            .iter()
            .zip([1.0, 2.0, 3.0])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-10, "err {err}");
        assert!(stats.iterations <= 5, "iterations {}", stats.iterations);
    }

    #[test]
    fn rosenbrock_converges_within_100() {
        let opts = OptimOptions::default();
        let (x, stats) = minimize(&mut rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(stats.iterations <= 100);
        assert!((x[0] - 1.0).abs() <= 1e-6 && (x[1] - 1.0).abs() <= 1e-6, "x = {x:?}");
    }

    #[test]
    fn dense_bfgs_matches_on_rosenbrock() {
        let opts = OptimOptions {
            algorithm: Algorithm::DenseBfgs,
            ..Default::default()
        };
        let (x, _) = minimize(&mut rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!((x[0] - 1.0).abs() <= 1e-6 && (x[1] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn dense_bfgs_refused_above_limit() {
        let n = DENSE_BFGS_LIMIT + 1;
        let mut obj = quadratic(vec![0.0; n]);
        let opts = OptimOptions {
            algorithm: Algorithm::DenseBfgs,
            ..Default::default()
        };
        assert!(matches!(
            minimize(&mut obj, &vec![1.0; n], &opts),
            Err(OptimError::DenseTooLarge { .. })
        ));
    }

    #[test]
    fn zero_iterations_returns_x0() {
        let mut obj = quadratic(vec![5.0]);
        let opts = OptimOptions {
            max_iterations: 0,
            ..Default::default()
        };
        let (x, stats) = minimize(&mut obj, &[2.0], &opts).unwrap();
        assert_eq!(x, vec![2.0]);
        assert_eq!(stats.iterations, 0);
    }

    #[test]
    fn accepted_steps_certify_strong_wolfe() {
        let opts = OptimOptions::default();
        let (_, stats) = minimize(&mut rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(!stats.steps.is_empty());
        for (i, s) in stats.steps.iter().enumerate() {
            assert!(
                s.satisfies_wolfe(opts.c1, opts.c2),
                "step {i} violates Wolfe: {s:?}"
            );
        }
    }

    #[test]
    fn per_iteration_loss_is_monotone() {
        let opts = OptimOptions::default();
        let (_, stats) = minimize(&mut rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        let mut prev = f64::INFINITY;
        for s in &stats.steps {
            assert!(s.f_after <= prev.min(s.f_before) + 1e-15);
            prev = s.f_after;
        }
        assert!(stats.best_loss <= stats.steps.first().unwrap().f_before);
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut obj = quadratic(vec![1.0, -2.0]);
        let opts = OptimOptions {
            algorithm: Algorithm::Adam,
            max_iterations: 500,
            adam: AdamOptions {
                rate: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let (x, stats) = minimize(&mut obj, &[0.0, 0.0], &opts).unwrap();
        assert!(stats.final_loss < 0.05, "loss {}", stats.final_loss);
        assert!((x[0] - 1.0).abs() < 0.3);
    }

    #[test]
    fn evaluator_failure_propagates() {
        let mut obj = |_x: &[f64]| -> Result<(f64, Vec<f64>), String> {
            Err("synthetic divergence at point 7".into())
        };
        let opts = OptimOptions::default();
        assert!(matches!(
            minimize(&mut obj, &[0.0], &opts),
            Err(OptimError::Evaluator { .. })
        ));
    }

    #[test]
    fn non_finite_start_is_reported() {
        let mut obj = |_x: &[f64]| -> Result<(f64, Vec<f64>), String> {
            Ok((f64::INFINITY, vec![0.0]))
        };
        let opts = OptimOptions::default();
        assert!(matches!(
            minimize(&mut obj, &[0.0], &opts),
            Err(OptimError::NonFiniteAtStart)
        ));
    }
}
