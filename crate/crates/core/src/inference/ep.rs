use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    check_data, kernel_grad, precision_form, symmetrize, Diagnostics, EngineId, EngineState, GaussianPosterior,
    InferenceResult, Predictor, SiteForm,
};
use crate::efd::{Distribution, LikelihoodFamily, Link};
use crate::error::{GgpmError, Result};
use crate::kernels::KernelSpec;
use crate::numerics::special::LN_SQRT_2PI;
use crate::numerics::{integrate_adaptive, PsdFactor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpOptions {
    pub max_sweeps: usize,
    /// Stop when no site parameter moves by more than this in a sweep.
    pub tol: f64,
    /// Weight of the moment-matched proposal in each damped update, in (0, 1].
    /// The first sweep from vacuous sites is undamped.
    pub damping: f64,
    /// Relative tolerance of the tilted-moment integrals.
    pub quad_tol: f64,
}

impl Default for EpOptions {
    fn default() -> Self {
        Self { max_sweeps: 200, tol: 1e-6, damping: 0.9, quad_tol: 1e-10 }
    }
}

/// Site approximations in natural form: precision tau and shift nu, so
/// site i is proportional to exp(nu_i eta - tau_i eta^2 / 2).
#[derive(Debug, Clone, PartialEq)]
pub struct EpSites {
    pub tau: DVector<f64>,
    pub nu: DVector<f64>,
}

impl EpSites {
    pub fn vacuous(n: usize) -> Self {
        Self { tau: DVector::zeros(n), nu: DVector::zeros(n) }
    }

    /// Site (mean, variance); variance is +infinity for a vacuous site.
    pub fn mean_var(&self, i: usize) -> (f64, f64) {
        if self.tau[i] == 0.0 {
            (0.0, f64::INFINITY)
        } else {
            (self.nu[i] / self.tau[i], 1.0 / self.tau[i])
        }
    }
}

/// Moments of the tilted distribution p(y | eta) N(eta | m, v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltedMoments {
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
    /// d log Z / d phi.
    pub dlog_z_dphi: f64,
}

/// Tilted moments with the default integration tolerance.
pub fn tilted_moments(lik: &LikelihoodFamily, y: f64, m: f64, v: f64) -> Result<TiltedMoments> {
    lik.check_support(y)?;
    tilted(lik, y, m, v, EpOptions::default().quad_tol)
}

fn gaussian_tilted(y: f64, m: f64, v: f64, phi: f64) -> TiltedMoments {
    let s = v + phi;
    let d = y - m;
    TiltedMoments {
        log_z: -LN_SQRT_2PI - 0.5 * s.ln() - 0.5 * d * d / s,
        mean: (m * phi + y * v) / s,
        var: v * phi / s,
        dlog_z_dphi: -0.5 / s + 0.5 * d * d / (s * s),
    }
}

pub(crate) fn tilted(lik: &LikelihoodFamily, y: f64, m: f64, v: f64, rel_tol: f64) -> Result<TiltedMoments> {
    if !(v > 0.0 && v.is_finite() && m.is_finite()) {
        return Err(GgpmError::Parameter(format!("cavity N({m}, {v})")));
    }
    if lik.dist == Distribution::Gaussian && lik.link == Link::Canonical {
        return Ok(gaussian_tilted(y, m, v, lik.dispersion()));
    }
    // h(e) = log p(y | e) - (e - m)^2 / (2v), with its first two derivatives
    let h = |e: f64| -> (f64, f64, f64) {
        match lik.terms_unchecked(y, e) {
            Ok(t) => {
                let d = e - m;
                (t.logp - 0.5 * d * d / v, t.d1 - d / v, t.d2 - 1.0 / v)
            }
            Err(_) => (f64::NEG_INFINITY, f64::NAN, f64::NAN),
        }
    };
    let sd = v.sqrt();
    let mut e = m;
    let mut cur = h(e);
    if !cur.0.is_finite() {
        return Err(GgpmError::NonFinite(format!("tilted density at the cavity mean {m}")));
    }
    // trust radius, doubled after every accepted step that reaches it
    let mut radius = 10.0 * sd;
    for _ in 0..200 {
        let (_, g, hh) = cur;
        let scale = if hh < 0.0 { (-1.0 / hh).sqrt() } else { sd };
        if (g * scale).abs() < 1e-11 {
            break;
        }
        let mut step = if hh < 0.0 { -g / hh } else { g * v };
        let clamped = step.abs() >= radius;
        step = step.clamp(-radius, radius);
        let mut moved = false;
        for k in 0..60 {
            let cand = h(e + step);
            if cand.0 >= cur.0 && cand.1.is_finite() {
                e += step;
                cur = cand;
                moved = true;
                if clamped && k == 0 {
                    radius *= 2.0;
                }
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (h_max, _, hh) = cur;
    let mode = e;
    // the integrand carries the relative rounding noise of log p
    let rel_tol = match lik.terms_unchecked(y, mode) {
        Ok(t) => {
            let noise = 16.0
                * f64::EPSILON
                * (t.logp.abs() + lik.dispersion() * t.logp_phi.abs() + t.d2.abs() * (1.0 + mode.abs()));
            rel_tol.max(4.0 * noise)
        }
        Err(_) => rel_tol,
    };
    let sl = if hh < 0.0 { (-1.0 / hh).sqrt().min(sd) } else { sd };

    // integration limits where the integrand has fallen by e^-46
    let below = |p: f64| {
        let v = h(p).0;
        !(v > h_max - 46.0)
    };
    let mut lo = 8.0 * sl;
    while !below(mode - lo) && lo < 1e4 * sd {
        lo *= 1.5;
    }
    let mut hi = 8.0 * sl;
    while !below(mode + hi) && hi < 1e4 * sd {
        hi *= 1.5;
    }

    let f = |p: f64| -> [f64; 4] {
        match lik.terms_unchecked(y, p) {
            Ok(t) => {
                let d = p - m;
                let wgt = (t.logp - 0.5 * d * d / v - h_max).exp();
                if wgt == 0.0 {
                    return [0.0; 4];
                }
                let c = p - mode;
                [wgt, wgt * c, wgt * c * c, wgt * t.logp_phi]
            }
            Err(_) => [0.0; 4],
        }
    };
    // integrate in pieces so each one resolves the local shape
    let pieces = 8;
    let a = mode - lo;
    let b = mode + hi;
    let mut acc = [0.0; 4];
    let mut knots: Vec<f64> = Vec::with_capacity(2 * pieces + 1);
    for j in 0..=pieces {
        knots.push(a + (mode - a) * j as f64 / pieces as f64);
    }
    for j in 1..=pieces {
        knots.push(mode + (b - mode) * j as f64 / pieces as f64);
    }
    for wnd in knots.windows(2) {
        let part = integrate_adaptive(f, wnd[0], wnd[1], rel_tol, 1e-15 * sl)?;
        for k in 0..4 {
            acc[k] += part[k];
        }
    }
    let [i0, i1, i2, i3] = acc;
    if !(i0 > 0.0) {
        return Err(GgpmError::NonFinite("tilted normalizer".into()));
    }
    let mc = i1 / i0;
    let var = i2 / i0 - mc * mc;
    if !(var > 0.0) {
        return Err(GgpmError::NonFinite(format!("tilted variance {var}")));
    }
    Ok(TiltedMoments {
        log_z: h_max + i0.ln() - LN_SQRT_2PI - 0.5 * v.ln(),
        mean: mode + mc,
        var,
        dlog_z_dphi: i3 / i0,
    })
}

struct EpState {
    sigma: DMatrix<f64>,
    mu: DVector<f64>,
    logdet_b: f64,
}

fn recompute(l: &DMatrix<f64>, sites: &EpSites) -> Result<EpState> {
    let pf = precision_form(l, &sites.tau)?;
    let mu = &pf.v * &sites.nu;
    Ok(EpState { sigma: pf.v, mu, logdet_b: pf.logdet_b })
}

/// Expectation propagation from vacuous sites.
pub fn ep_infer(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &EpOptions,
) -> Result<InferenceResult> {
    ep_infer_from(lik, kernel, x, y, opts, None)
}

/// Expectation propagation, optionally starting from previous sites.
pub fn ep_infer_from(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &EpOptions,
    init: Option<&EpSites>,
) -> Result<InferenceResult> {
    check_data(lik, x, y)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(GgpmError::Parameter(format!("EP damping {} outside (0, 1]", opts.damping)));
    }
    let n = y.len();
    let k = kernel.gram(x);
    let l = PsdFactor::new(&k, 1e-10)?.l();
    let mut sites = match init {
        Some(s) if s.tau.len() == n && s.nu.len() == n => s.clone(),
        Some(s) => return Err(GgpmError::DimensionMismatch { expected: n, found: s.tau.len() }),
        None => EpSites::vacuous(n),
    };
    let mut st = recompute(&l, &sites)?;
    let mut diagnostics = Diagnostics::new(EngineId::Ep);
    diagnostics.converged = false;

    for sweep in 0..opts.max_sweeps {
        let delta = if sweep == 0 && init.is_none() { 1.0 } else { opts.damping };
        let mut max_change: f64 = 0.0;
        for i in 0..n {
            let sii = st.sigma[(i, i)];
            let tau_c = 1.0 / sii - sites.tau[i];
            let nu_c = st.mu[i] / sii - sites.nu[i];
            if !(tau_c > 0.0) {
                diagnostics.skipped_updates += 1;
                continue;
            }
            let tm = tilted(lik, y[i], nu_c / tau_c, 1.0 / tau_c, opts.quad_tol)?;
            let tau_prop = 1.0 / tm.var - tau_c;
            let nu_prop = tm.mean / tm.var - nu_c;
            let tau_new = (1.0 - delta) * sites.tau[i] + delta * tau_prop;
            let nu_new = (1.0 - delta) * sites.nu[i] + delta * nu_prop;
            let dtau = tau_new - sites.tau[i];
            let denom = 1.0 + dtau * sii;
            if !(denom > 0.0) || !tau_new.is_finite() || !nu_new.is_finite() {
                diagnostics.skipped_updates += 1;
                continue;
            }
            // changes are measured relative to sites larger than one
            max_change = max_change
                .max(dtau.abs() / tau_new.abs().max(1.0))
                .max((nu_new - sites.nu[i]).abs() / nu_new.abs().max(1.0));
            sites.tau[i] = tau_new;
            sites.nu[i] = nu_new;
            let s = st.sigma.column(i).clone_owned();
            st.sigma -= (dtau / denom) * &s * s.transpose();
            st.mu = &st.sigma * &sites.nu;
        }
        st = recompute(&l, &sites)?;
        diagnostics.iterations = sweep + 1;
        if max_change < opts.tol {
            diagnostics.converged = true;
            break;
        }
    }

    // marginal and dispersion gradient at the final sites
    let mut log_z = -0.5 * st.logdet_b + 0.5 * sites.nu.dot(&st.mu);
    let mut g_phi = 0.0;
    for i in 0..n {
        let sii = st.sigma[(i, i)];
        let tau_c = 1.0 / sii - sites.tau[i];
        if !(tau_c > 0.0) {
            return Err(GgpmError::Convergence(format!("EP cavity {i} is improper")));
        }
        let nu_c = st.mu[i] / sii - sites.nu[i];
        let m_c = nu_c / tau_c;
        let tm = tilted(lik, y[i], m_c, 1.0 / tau_c, opts.quad_tol)?;
        let (tt, tn) = (sites.tau[i], sites.nu[i]);
        log_z += tm.log_z
            + 0.5 * (tt / tau_c).ln_1p()
            + 0.5 * (m_c * m_c * tt * tau_c - 2.0 * m_c * tn * tau_c - tn * tn) / (tt + tau_c);
        g_phi += tm.dlog_z_dphi;
    }
    if !log_z.is_finite() {
        return Err(GgpmError::NonFinite("EP log marginal".into()));
    }

    let alpha = &sites.nu - sites.tau.component_mul(&st.mu);
    let td = DMatrix::from_diagonal(&sites.tau);
    let mut r = &td - &td * &st.sigma * &td;
    symmetrize(&mut r);
    let mut grad = kernel_grad(&kernel.gram_gradients(x), &alpha, &r);
    grad.push(if lik.has_free_dispersion() { g_phi * lik.dispersion() } else { 0.0 });

    Ok(InferenceResult {
        posterior: GaussianPosterior {
            mean: st.mu,
            cov: st.sigma,
            sites: SiteForm::from_natural(&sites.tau, &sites.nu),
        },
        log_marginal: log_z,
        grad,
        diagnostics,
        predictor: Predictor { alpha, r },
        state: EngineState::Ep(sites),
    })
}
