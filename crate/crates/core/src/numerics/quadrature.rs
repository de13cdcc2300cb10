//! Gaussian expectations (Gauss-Hermite with optional order doubling),
//! adaptive Gauss-Kronrod integration and truncated count sums.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{GgpmError, Result};

pub const DEFAULT_ORDER: usize = 61;
const MAX_ORDER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureScheme {
    GaussHermite,
    AdaptiveRefinement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianExpectationPlan {
    pub order: usize,
    pub scheme: QuadratureScheme,
    pub tolerance: f64,
}

impl Default for GaussianExpectationPlan {
    fn default() -> Self {
        Self { order: DEFAULT_ORDER, scheme: QuadratureScheme::GaussHermite, tolerance: 1e-10 }
    }
}

/// Gauss-Hermite rule for the weight e^{-x^2}.
#[derive(Debug)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn compute_hermite(n: usize) -> HermiteRule {
    // Newton iteration on orthonormal Hermite polynomials, seeded with the
    // classic asymptotic root estimates.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    HermiteRule { nodes: x, weights: w }
}

/// Cached Gauss-Hermite rule of the given order.
pub fn gauss_hermite(order: usize) -> Arc<HermiteRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<HermiteRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard.entry(order).or_insert_with(|| Arc::new(compute_hermite(order))).clone()
}

/// E[f(eta)] for eta ~ N(m, v) using a fixed Gauss-Hermite rule, for a
/// vector-valued integrand.
pub fn hermite_expect<const K: usize>(mut f: impl FnMut(f64) -> [f64; K], m: f64, v: f64, order: usize) -> [f64; K] {
    let rule = gauss_hermite(order);
    let s = (2.0 * v).sqrt();
    let norm = 1.0 / std::f64::consts::PI.sqrt();
    let mut acc = [0.0; K];
    for (x, w) in rule.nodes.iter().zip(rule.weights.iter()) {
        let vals = f(m + s * x);
        for k in 0..K {
            acc[k] += w * norm * vals[k];
        }
    }
    acc
}

/// E[f(eta)] for eta ~ N(m, v).
pub fn gaussian_expect(mut f: impl FnMut(f64) -> f64, m: f64, v: f64, plan: &GaussianExpectationPlan) -> Result<f64> {
    if !(v >= 0.0) || !m.is_finite() {
        return Err(GgpmError::Parameter(format!("gaussian_expect with m={m}, v={v}")));
    }
    let mut eval = |order: usize| -> Result<f64> {
        let mut bad = false;
        let [e] = hermite_expect(
            |x| {
                let y = f(x);
                if !y.is_finite() {
                    bad = true;
                }
                [y]
            },
            m,
            v,
            order,
        );
        if bad {
            Err(GgpmError::NonFinite("gaussian expectation integrand".into()))
        } else {
            Ok(e)
        }
    };
    let mut order = plan.order.max(1);
    let mut est = eval(order)?;
    if plan.scheme == QuadratureScheme::GaussHermite {
        return Ok(est);
    }
    while order < MAX_ORDER {
        order *= 2;
        let next = eval(order)?;
        if (next - est).abs() <= plan.tolerance * next.abs().max(1e-300) {
            return Ok(next);
        }
        est = next;
    }
    Err(GgpmError::Convergence(format!("gauss-hermite refinement stalled at order {order}")))
}

// 15-point Kronrod nodes and weights with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// K15 estimate, |K15 - G7| error and K15 estimate of the integral of |f|,
/// per component.
fn kronrod<const K: usize>(f: &mut impl FnMut(f64) -> [f64; K], a: f64, b: f64) -> [[f64; K]; 3] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = [0.0; K];
    let mut rg = [0.0; K];
    let mut ra = [0.0; K];
    for k in 0..K {
        rk[k] = WGK[7] * fc[k];
        rg[k] = WG[3] * fc[k];
        ra[k] = WGK[7] * fc[k].abs();
    }
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        for k in 0..K {
            let s = f1[k] + f2[k];
            rk[k] += WGK[j] * s;
            ra[k] += WGK[j] * (f1[k].abs() + f2[k].abs());
            if j % 2 == 1 {
                rg[k] += WG[j / 2] * s;
            }
        }
    }
    let mut err = [0.0; K];
    for k in 0..K {
        rk[k] *= h;
        rg[k] *= h;
        ra[k] *= h.abs();
        err[k] = (rk[k] - rg[k]).abs();
    }
    [rk, err, ra]
}

/// Adaptive Gauss-Kronrod (G7/K15) integration of a vector integrand over
/// [a, b]. Each component's error must fall below `abs_tol` or `rel_tol`
/// times the integral of its absolute value.
pub fn integrate_adaptive<const K: usize>(
    mut f: impl FnMut(f64) -> [f64; K],
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<[f64; K]> {
    let max_intervals = 2000;
    let mut intervals: Vec<(f64, f64, [[f64; K]; 3])> = vec![(a, b, kronrod(&mut f, a, b))];
    loop {
        let mut total = [0.0; K];
        let mut err = [0.0; K];
        let mut mass = [0.0; K];
        for iv in &intervals {
            for k in 0..K {
                total[k] += iv.2[0][k];
                err[k] += iv.2[1][k];
                mass[k] += iv.2[2][k];
            }
        }
        if total.iter().any(|x| !x.is_finite()) {
            return Err(GgpmError::NonFinite("adaptive quadrature".into()));
        }
        let tol: [f64; K] = std::array::from_fn(|k| abs_tol.max(rel_tol * mass[k]));
        if (0..K).all(|k| err[k] <= tol[k]) {
            return Ok(total);
        }
        if intervals.len() >= max_intervals {
            let worst = (0..K).map(|k| err[k] / tol[k].max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
            return Err(GgpmError::Convergence(format!(
                "adaptive quadrature error {worst:.1e} times tolerance after {max_intervals} intervals"
            )));
        }
        let badness = |e: &[f64; K]| (0..K).map(|k| e[k] / tol[k].max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        let worst = (0..intervals.len())
            .max_by(|&i, &j| badness(&intervals[i].2[1]).total_cmp(&badness(&intervals[j].2[1])))
            .unwrap_or(0);
        let (lo, hi, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        intervals.push((lo, mid, kronrod(&mut f, lo, mid)));
        intervals.push((mid, hi, kronrod(&mut f, mid, hi)));
    }
}

/// Truncation policy for sums over counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountCap {
    /// Approximate mode and variance of the weights, used to size the cap.
    pub mode: f64,
    pub var: f64,
    pub rel_tail: f64,
}

impl CountCap {
    pub fn new(mode: f64, var: f64) -> Self {
        Self { mode, var, rel_tail: 1e-12 }
    }

    pub fn max_terms(&self) -> usize {
        let c = (self.mode + 40.0 * self.var.max(0.0).sqrt()).ceil();
        (c.max(1000.0)) as usize
    }
}

/// Sum of f(n) * exp(log_weight(n)) over n = 0, 1, ..., truncated once the
/// weights are past their peak and the remaining mass is negligible.
pub fn discrete_expect(
    mut f: impl FnMut(u64) -> f64,
    mut log_weight: impl FnMut(u64) -> f64,
    cap: &CountCap,
) -> Result<f64> {
    let max_terms = cap.max_terms() as u64;
    let mut total_w = 0.0;
    let mut acc = 0.0;
    let mut prev_lw = f64::NEG_INFINITY;
    for n in 0..=max_terms {
        let lw = log_weight(n);
        let w = lw.exp();
        let mut fn_abs = 0.0;
        if w > 0.0 {
            let fv = f(n);
            fn_abs = fv.abs();
            acc += fv * w;
            total_w += w;
        }
        let past_peak = lw < prev_lw && (n as f64) > cap.mode;
        if past_peak && total_w > 0.0 {
            // geometric bound on the remaining tail using the current ratio
            let ratio = (lw - prev_lw).exp();
            let tail = w * ratio / (1.0 - ratio).max(1e-300);
            if ratio < 1.0 && tail * fn_abs.max(1.0) <= cap.rel_tail * acc.abs().max(total_w) {
                return Ok(acc);
            }
        }
        prev_lw = lw;
    }
    Err(GgpmError::Convergence(format!("count sum not converged within {max_terms} terms")))
}
