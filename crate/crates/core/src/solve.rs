//! Equality-constrained maximisation:
//!
//! ```text
//! maximize merit(v)  subject to  c(v) = 0
//! ```
//!
//! Outer loop: augmented Lagrangian on `-merit(v) + λᵀc(v) + ρ/2 |c(v)|²`.
//! Inner loop: limited-memory BFGS with a strong-Wolfe line search.
//!
//! Reported multipliers use the convention `∇merit + Jᵀμ = 0` at a KKT point.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// An equality-constrained maximisation problem.
pub trait Nlp {
    fn dim(&self) -> usize;
    fn n_constraints(&self) -> usize;
    /// Objective value; `-∞` signals an evaluation-domain failure.
    fn merit(&self, v: &[f64]) -> f64;
    /// Objective value with its gradient written into `grad`.
    fn merit_gradient(&self, v: &[f64], grad: &mut [f64]) -> f64;
    fn constraints(&self, v: &[f64], out: &mut [f64]);
    /// Accumulates `J(v)ᵀ w` into `out`.
    fn constraints_jt_mul(&self, v: &[f64], w: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Constraint violation tolerance (∞-norm).
    pub tol_c: f64,
    /// Lagrangian-gradient tolerance, scaled by `1 + |merit|`.
    pub tol_g: f64,
    pub max_outer: usize,
    /// Budget of inner iterations summed over all outer iterations.
    pub max_inner_total: usize,
    pub memory: usize,
    pub rho_init: f64,
    pub rho_factor: f64,
    pub rho_max: f64,
    /// Required violation reduction per outer iteration before `ρ` grows.
    pub violation_decrease: f64,
    pub multiplier_bound: f64,
    /// Record one trace row per inner iteration.
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_c: 1e-8,
            tol_g: 1e-6,
            max_outer: 40,
            max_inner_total: 200_000,
            memory: 20,
            rho_init: 10.0,
            rho_factor: 10.0,
            rho_max: 1e12,
            violation_decrease: 0.25,
            multiplier_bound: 1e8,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub outer: usize,
    pub inner: usize,
    pub evaluations: usize,
}

/// State at the end of one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub rho: f64,
    pub violation: f64,
    pub lagrangian_gradient: f64,
    pub merit: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub merit: f64,
    pub feasibility: f64,
    pub gradient_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NlpSolution {
    pub v: Vec<f64>,
    pub merit: f64,
    pub constraint_violation: f64,
    pub lagrangian_gradient: f64,
    pub multipliers: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: IterationCounts,
    pub history: Vec<OuterRecord>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl NlpSolution {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        write_trace_csv(&self.trace, out)
    }
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "merit", "feasibility", "gradient_norm", "step"])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            r.merit.to_string(),
            r.feasibility.to_string(),
            r.gradient_norm.to_string(),
            r.step.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

/// Result of an unconstrained minimisation.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: InnerStatus,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LS: usize = 40;

struct LinePoint {
    alpha: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Strong-Wolfe line search along `p` from `x` (bracketing and zoom with
/// safeguarded cubic interpolation).
fn line_search<F>(
    fun: &mut F,
    x: &[f64],
    f0: f64,
    d0: f64,
    p: &[f64],
    alpha0: f64,
    evals: &mut usize,
) -> Option<LinePoint>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut eval = |alpha: f64, evals: &mut usize| -> LinePoint {
        let xa: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + alpha * pi).collect();
        let mut g = vec![0.0; n];
        let f = fun(&xa, &mut g);
        *evals += 1;
        let (f, d) = if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            (f, dot(&g, p))
        } else {
            (f64::INFINITY, f64::NAN)
        };
        LinePoint { alpha, f, d, x: xa, g }
    };
    let armijo = |pt: &LinePoint| pt.f <= f0 + WOLFE_C1 * pt.alpha * d0;
    let curvature = |pt: &LinePoint| pt.d.abs() <= -WOLFE_C2 * d0;

    let mut prev = LinePoint {
        alpha: 0.0,
        f: f0,
        d: d0,
        x: x.to_vec(),
        g: Vec::new(),
    };
    let mut alpha = alpha0;
    let mut best: Option<LinePoint> = None;
    let (mut lo, mut hi);
    let mut i = 0;
    loop {
        let cur = eval(alpha, evals);
        if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.d >= 0.0 {
            hi = prev;
            lo = cur;
            break;
        }
        i += 1;
        if i >= MAX_LS {
            return Some(cur);
        }
        alpha = cur.alpha * 2.0;
        prev = cur;
    }

    // zoom: `lo` satisfies Armijo and has the lowest value so far
    for _ in 0..MAX_LS {
        let width = hi.alpha - lo.alpha;
        if width.abs() <= 1e-14 * lo.alpha.abs().max(1e-14) {
            break;
        }
        let mut trial = f64::NAN;
        if hi.f.is_finite() && lo.d.is_finite() && hi.d.is_finite() {
            // cubic through (lo, hi) values and slopes
            let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (lo.alpha - hi.alpha);
            let disc = d1 * d1 - lo.d * hi.d;
            if disc >= 0.0 {
                let d2 = disc.sqrt() * (hi.alpha - lo.alpha).signum();
                trial = hi.alpha - (hi.alpha - lo.alpha) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
            }
        } else if hi.f.is_finite() && lo.d.is_finite() {
            // quadratic through lo value/slope and hi value
            let a = width;
            let denom = 2.0 * (hi.f - lo.f - lo.d * a);
            if denom > 0.0 {
                trial = lo.alpha - lo.d * a * a / denom;
            }
        }
        let (a_min, a_max) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let margin = 0.1 * (a_max - a_min);
        if !(trial.is_finite() && trial >= a_min + margin && trial <= a_max - margin) {
            trial = 0.5 * (lo.alpha + hi.alpha);
        }
        let cur = eval(trial, evals);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some(cur);
            }
            if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
        if lo.alpha > 0.0 && best.as_ref().is_none_or(|b| lo.f < b.f) {
            best = Some(LinePoint {
                alpha: lo.alpha,
                f: lo.f,
                d: lo.d,
                x: lo.x.clone(),
                g: lo.g.clone(),
            });
        }
    }
    // accept a point with sufficient decrease even without the curvature condition
    if lo.alpha > 0.0 && lo.f < f0 {
        return Some(lo);
    }
    best.filter(|b| b.f < f0)
}

/// Minimises `fun` (value and gradient) by L-BFGS until `|∇f|∞ ≤ tol`.
pub fn lbfgs_minimize<F>(
    mut fun: F,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
    memory: usize,
    mut on_iter: impl FnMut(usize, &[f64], f64, &[f64], f64),
) -> InnerResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = fun(&x, &mut g);
    let mut evaluations = 1;
    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(memory);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(memory);
    let mut rho_hist: Vec<f64> = Vec::with_capacity(memory);
    let mut alpha_buf = vec![0.0; memory];
    let mut status = InnerStatus::MaxIterations;
    let mut iterations = 0;

    if !f.is_finite() {
        return InnerResult {
            x,
            f,
            grad: g,
            iterations,
            evaluations,
            status: InnerStatus::LineSearchFailure,
        };
    }

    while iterations < max_iter {
        if inf_norm(&g) <= tol {
            status = InnerStatus::Converged;
            break;
        }
        // two-loop recursion
        let mut p: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        for i in (0..k).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &p);
            alpha_buf[i] = a;
            for (pj, yj) in p.iter_mut().zip(&y_hist[i]) {
                *pj -= a * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
            p.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let b = rho_hist[i] * dot(&y_hist[i], &p);
            for (pj, sj) in p.iter_mut().zip(&s_hist[i]) {
                *pj += (alpha_buf[i] - b) * sj;
            }
        }
        let mut d0 = dot(&g, &p);
        if !(d0 < 0.0) {
            // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            p = g.iter().map(|v| -v).collect();
            d0 = dot(&g, &p);
        }
        let alpha0 = if s_hist.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let Some(pt) = line_search(&mut fun, &x, f, d0, &p, alpha0, &mut evaluations) else {
            if !s_hist.is_empty() {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            status = InnerStatus::LineSearchFailure;
            break;
        };
        iterations += 1;
        let s: Vec<f64> = pt.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = pt.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        x = pt.x;
        g = pt.g;
        f = pt.f;
        on_iter(iterations, &x, f, &g, pt.alpha);
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if s_hist.len() == memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
        }
    }
    if status == InnerStatus::MaxIterations && inf_norm(&g) <= tol {
        status = InnerStatus::Converged;
    }
    InnerResult {
        x,
        f,
        grad: g,
        iterations,
        evaluations,
        status,
    }
}

/// Maximises `problem.merit` subject to `problem.constraints = 0` from `v_init`.
pub fn solve<P: Nlp + ?Sized>(problem: &P, v_init: &[f64], opts: &SolverOptions) -> NlpSolution {
    let dim = problem.dim();
    let nc = problem.n_constraints();
    assert_eq!(v_init.len(), dim, "initial point has the wrong dimension");

    let mut lambda = vec![0.0; nc];
    let mut rho = opts.rho_init;
    let mut v = v_init.to_vec();
    let mut c = vec![0.0; nc];
    problem.constraints(&v, &mut c);
    let mut violation = inf_norm(&c);
    let mut merit = problem.merit(&v);
    let mut counts = IterationCounts::default();
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut lag_grad = f64::INFINITY;

    for _outer in 0..opts.max_outer {
        counts.outer += 1;
        let tol_g = opts.tol_g * (1.0 + merit.abs().min(1e12));
        let inner_tol = if nc == 0 {
            0.1 * tol_g
        } else {
            (0.1 * tol_g).max(0.1 * violation)
        };
        let budget = opts.max_inner_total.saturating_sub(counts.inner).max(1);

        let lam = lambda.clone();
        let mut cbuf = vec![0.0; nc];
        let mut wbuf = vec![0.0; nc];
        let augmented = |x: &[f64], grad: &mut [f64]| -> f64 {
            let m = problem.merit_gradient(x, grad);
            if !m.is_finite() {
                return f64::INFINITY;
            }
            grad.iter_mut().for_each(|g| *g = -*g);
            let mut val = -m;
            if nc > 0 {
                problem.constraints(x, &mut cbuf);
                for i in 0..nc {
                    wbuf[i] = lam[i] + rho * cbuf[i];
                    val += lam[i] * cbuf[i] + 0.5 * rho * cbuf[i] * cbuf[i];
                }
                problem.constraints_jt_mul(x, &wbuf, grad);
            }
            val
        };
        let base_iter = counts.inner;
        let record = opts.trace;
        let mut ctrace = vec![0.0; nc];
        let inner = lbfgs_minimize(augmented, &v, inner_tol, budget, opts.memory, |it, x, _f, g, step| {
            if record {
                problem.constraints(x, &mut ctrace);
                trace.push(TraceRow {
                    iter: base_iter + it,
                    merit: problem.merit(x),
                    feasibility: inf_norm(&ctrace),
                    gradient_norm: inf_norm(g),
                    step,
                });
            }
        });
        counts.inner += inner.iterations;
        counts.evaluations += inner.evaluations;
        v = inner.x;
        merit = problem.merit(&v);
        problem.constraints(&v, &mut c);
        let prev_violation = violation;
        violation = inf_norm(&c);
        // inner gradient = -(∇merit + Jᵀμ) with μ = -(λ + ρc)
        lag_grad = inf_norm(&inner.grad);
        for i in 0..nc {
            lambda[i] = (lambda[i] + rho * c[i]).clamp(-opts.multiplier_bound, opts.multiplier_bound);
        }
        history.push(OuterRecord {
            rho,
            violation,
            lagrangian_gradient: lag_grad,
            merit,
            inner_iterations: inner.iterations,
        });

        let tol_g = opts.tol_g * (1.0 + merit.abs().min(1e12));
        if violation <= opts.tol_c && lag_grad <= tol_g && merit.is_finite() {
            status = SolveStatus::Converged;
            break;
        }
        if inner.status == InnerStatus::LineSearchFailure && inner.iterations == 0 && violation <= opts.tol_c {
            status = SolveStatus::LineSearchFailure;
            break;
        }
        if counts.inner >= opts.max_inner_total {
            status = if inner.status == InnerStatus::LineSearchFailure {
                SolveStatus::LineSearchFailure
            } else {
                SolveStatus::MaxIterations
            };
            break;
        }
        if nc > 0 && violation > opts.violation_decrease * prev_violation.max(opts.tol_c) {
            rho = (rho * opts.rho_factor).min(opts.rho_max);
        }
    }

    let multipliers = lambda.iter().map(|l| -l).collect();
    NlpSolution {
        v,
        merit,
        constraint_violation: violation,
        lagrangian_gradient: lag_grad,
        multipliers,
        status,
        iterations: counts,
        history,
        trace,
    }
}

/// Central-difference gradient with per-coordinate step `rel_step·max(|v_i|, 1)`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, v: &[f64], rel_step: f64) -> Vec<f64> {
    let mut w = v.to_vec();
    (0..v.len())
        .map(|i| {
            let h = rel_step * v[i].abs().max(1.0);
            w[i] = v[i] + h;
            let fp = f(&w);
            w[i] = v[i] - h;
            let fm = f(&w);
            w[i] = v[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// First-order optimality report at `(v, μ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktReport {
    /// `∇merit + Jᵀμ`.
    pub stationarity: Vec<f64>,
    pub stationarity_norm: f64,
    pub feasibility: f64,
    pub merit: f64,
    pub pass: bool,
}

pub fn check_kkt<P: Nlp + ?Sized>(problem: &P, v: &[f64], multipliers: &[f64], opts: &SolverOptions) -> KktReport {
    let mut grad = vec![0.0; problem.dim()];
    let merit = problem.merit_gradient(v, &mut grad);
    problem.constraints_jt_mul(v, multipliers, &mut grad);
    let mut c = vec![0.0; problem.n_constraints()];
    problem.constraints(v, &mut c);
    let feasibility = inf_norm(&c);
    let stationarity_norm = inf_norm(&grad);
    let pass = merit.is_finite() && feasibility <= opts.tol_c && stationarity_norm <= opts.tol_g * (1.0 + merit.abs());
    KktReport {
        stationarity: grad,
        stationarity_norm,
        feasibility,
        merit,
        pass,
    }
}
