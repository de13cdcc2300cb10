//! L-BFGS minimizer with a strong-Wolfe line search, and a central
//! finite-difference gradient checker.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    /// Stop when the infinity norm of the gradient drops below this.
    pub gtol: f64,
    pub max_iter: usize,
    /// Stop when the relative decrease over one iteration is below this.
    pub ftol: f64,
    pub memory: usize,
    pub max_line_search: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { gtol: 1e-5, max_iter: 200, ftol: 1e-12, memory: 10, max_line_search: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimizeStatus {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// The line search could not find an acceptable step; the result holds
    /// the best point found.
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: MinimizeStatus,
    /// Objective value at x0 followed by each accepted iterate.
    pub trace: Vec<f64>,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        matches!(self.status, MinimizeStatus::GradientTolerance | MinimizeStatus::FunctionTolerance)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Probe {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dg: f64,
}

struct Evaluator<'a, F> {
    f: &'a mut F,
    count: usize,
}

impl<F, E> Evaluator<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    fn eval(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.count += 1;
        match (self.f)(x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|d| d.is_finite()) => Some((v, g)),
            _ => None,
        }
    }

    fn probe(&mut self, x: &[f64], d: &[f64], alpha: f64) -> Option<Probe> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        self.eval(&xt).map(|(f, g)| {
            let dg = dot(&g, d);
            Probe { alpha, f, g, dg }
        })
    }
}

fn cubic_min(a: &Probe, b: &Probe) -> f64 {
    let d1 = a.dg + b.dg - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let rad = d1 * d1 - a.dg * b.dg;
    let lo = a.alpha.min(b.alpha);
    let hi = a.alpha.max(b.alpha);
    let mid = 0.5 * (lo + hi);
    if rad < 0.0 {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * rad.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.dg + d2 - d1) / (b.dg - a.dg + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe line search. Non-finite or failing evaluations are treated
/// as +infinity, which forces the step to shrink.
fn line_search<F, E>(
    ev: &mut Evaluator<'_, F>,
    x: &[f64],
    f0: f64,
    dg0: f64,
    d: &[f64],
    alpha0: f64,
    max_steps: usize,
) -> Option<Probe>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let origin = Probe { alpha: 0.0, f: f0, g: Vec::new(), dg: dg0 };
    let mut prev = origin;
    let mut alpha = alpha0;
    let mut best: Option<Probe> = None;
    let mut steps = 0;
    let mut hi_fail: Option<f64> = None;
    // bracketing phase
    let (mut lo, mut hi) = loop {
        if steps >= max_steps {
            return best;
        }
        steps += 1;
        let Some(p) = ev.probe(x, d, alpha) else {
            hi_fail = Some(alpha);
            alpha = prev.alpha + 0.25 * (alpha - prev.alpha);
            if alpha - prev.alpha < 1e-16 {
                return best;
            }
            continue;
        };
        if p.f < f0 && best.as_ref().is_none_or(|b| p.f < b.f) {
            best = Some(Probe { alpha: p.alpha, f: p.f, g: p.g.clone(), dg: p.dg });
        }
        if p.f > f0 + C1 * p.alpha * dg0 || (p.f >= prev.f && prev.alpha > 0.0) {
            break (prev, p);
        }
        if p.dg.abs() <= -C2 * dg0 {
            return Some(p);
        }
        if p.dg >= 0.0 {
            break (p, prev);
        }
        let next = match hi_fail {
            Some(h) => 0.5 * (p.alpha + h),
            None => 2.0 * p.alpha,
        };
        prev = p;
        alpha = next;
    };
    // zoom phase
    while steps < max_steps {
        steps += 1;
        let a = if !hi.f.is_finite() || !lo.f.is_finite() { 0.5 * (lo.alpha + hi.alpha) } else { cubic_min(&lo, &hi) };
        if (hi.alpha - lo.alpha).abs() < 1e-14 * lo.alpha.abs().max(1e-10) {
            break;
        }
        let Some(p) = ev.probe(x, d, a) else {
            hi = Probe { alpha: a, f: f64::INFINITY, g: Vec::new(), dg: 0.0 };
            continue;
        };
        if p.f < f0 && best.as_ref().is_none_or(|b| p.f < b.f) {
            best = Some(Probe { alpha: p.alpha, f: p.f, g: p.g.clone(), dg: p.dg });
        }
        if p.f > f0 + C1 * p.alpha * dg0 || p.f >= lo.f {
            hi = p;
        } else {
            if p.dg.abs() <= -C2 * dg0 {
                return Some(p);
            }
            if p.dg * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    // accept a sufficient-decrease point even if curvature failed
    best.filter(|b| b.f <= f0 + C1 * b.alpha * dg0)
}

/// Minimizes `f` from `x0`. The objective returns (value, gradient); an
/// `Err` or non-finite value is treated as an infeasible point. Returns
/// `None` only when the objective is unusable at `x0`.
pub fn minimize<F, E>(mut f: F, x0: &[f64], opts: &MinimizeOptions) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let mut ev = Evaluator { f: &mut f, count: 0 };
    let (mut fx, mut g) = ev.eval(x0)?;
    let mut x = x0.to_vec();
    let mut trace = vec![fx];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let status = loop {
        if inf_norm(&g) < opts.gtol {
            break MinimizeStatus::GradientTolerance;
        }
        if iterations >= opts.max_iter {
            break MinimizeStatus::MaxIterations;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dg = dot(&d, &g);
        if !(dg < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            dg = dot(&d, &g);
        }
        let alpha0 = if mem.is_empty() { (1.0 / inf_norm(&d)).min(1.0) } else { 1.0 };
        let Some(p) = line_search(&mut ev, &x, fx, dg, &d, alpha0, opts.max_line_search) else {
            if !mem.is_empty() {
                mem.clear();
                continue;
            }
            break MinimizeStatus::LineSearchFailure;
        };
        let s: Vec<f64> = d.iter().map(|v| p.alpha * v).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        let decrease = fx - p.f;
        fx = p.f;
        g = p.g;
        trace.push(fx);
        iterations += 1;
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            mem.push_back((s, y, 1.0 / sy));
            if mem.len() > opts.memory {
                mem.pop_front();
            }
        }
        if decrease <= opts.ftol * fx.abs().max(1.0) {
            break if inf_norm(&g) < opts.gtol {
                MinimizeStatus::GradientTolerance
            } else {
                MinimizeStatus::FunctionTolerance
            };
        }
    };
    Some(Minimum { x, value: fx, grad: g, iterations, evaluations: ev.count, status, trace })
}

/// Per-coordinate comparison of an analytic gradient against central
/// differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: Vec<f64>,
    pub max_rel_error: f64,
}

/// Relative error |a - n| / max(|a|, |n|, floor).
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let d = (a - n).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(n.abs()).max(floor)
    }
}

/// Central-difference check. The step for coordinate i is
/// `step * max(1, |x_i|)`. Components whose magnitudes fall below
/// `floor` are compared on an absolute scale.
pub fn check_gradient<F, E>(mut objective: F, x: &[f64], step: f64, floor: f64) -> Result<GradientCheck, E>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let (_, analytic) = objective(x)?;
    let mut numeric = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let (fp, _) = objective(&xp)?;
        xp[i] = x[i] - h;
        let (fm, _) = objective(&xp)?;
        xp[i] = x[i];
        numeric.push((fp - fm) / (2.0 * h));
    }
    let rel_error: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| relative_error(*a, *n, floor)).collect();
    let max_rel_error = rel_error.iter().fold(0.0f64, |m, e| m.max(*e));
    Ok(GradientCheck { analytic, numeric, rel_error, max_rel_error })
}
