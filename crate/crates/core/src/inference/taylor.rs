use nalgebra::{DMatrix, DVector};

use super::{
    check_data, kernel_grad, symmetrize, Diagnostics, EngineId, EngineState, GaussianPosterior, InferenceResult,
    Predictor, SiteForm,
};
use crate::efd::{ExpansionPoint, LikelihoodFamily};
use crate::error::{GgpmError, Result};
use crate::kernels::KernelSpec;
use crate::numerics::PsdFactor;

/// Where the second-order expansion of each log-likelihood is taken.
#[derive(Debug, Clone, PartialEq)]
pub enum Expansion {
    /// eta_i = g(T(y_i)), the point where the first derivative vanishes.
    Canonical,
    /// eta_i = 0 for every observation.
    Agnostic,
    /// Caller-supplied points, treated as independent of phi.
    Explicit(Vec<f64>),
}

fn expansion_points(lik: &LikelihoodFamily, y: &[f64], expansion: &Expansion) -> Result<Vec<ExpansionPoint>> {
    match expansion {
        Expansion::Canonical => y.iter().map(|&v| lik.canonical_expansion_point(v)).collect(),
        Expansion::Agnostic => Ok(vec![ExpansionPoint { eta: 0.0, deta_dphi: 0.0, agnostic: true }; y.len()]),
        Expansion::Explicit(p) => {
            if p.len() != y.len() {
                return Err(GgpmError::DimensionMismatch { expected: y.len(), found: p.len() });
            }
            Ok(p.iter().map(|&eta| ExpansionPoint { eta, deta_dphi: 0.0, agnostic: false }).collect())
        }
    }
}

/// Closed-form Taylor approximation: GP regression on the targets
/// t = eta + w u with per-point noise w.
pub fn taylor_infer(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    expansion: &Expansion,
) -> Result<InferenceResult> {
    check_data(lik, x, y)?;
    let n = y.len();
    let points = expansion_points(lik, y, expansion)?;
    let mut terms = Vec::with_capacity(n);
    let mut w = DVector::zeros(n);
    let mut t = DVector::zeros(n);
    let mut r_sum = 0.0;
    for (i, (&yi, pt)) in y.iter().zip(&points).enumerate() {
        let tm = lik.terms(yi, pt.eta)?;
        let wi = tm.w();
        if !(wi > 0.0 && wi.is_finite()) {
            return Err(GgpmError::NegativeCurvature { index: i, w: wi });
        }
        let u = tm.u();
        w[i] = wi;
        t[i] = pt.eta + wi * u;
        r_sum += tm.logp + 0.5 * wi * u * u + 0.5 * wi.ln();
        terms.push(tm);
    }

    let k = kernel.gram(x);
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += w[i];
    }
    let fa = PsdFactor::new(&a, 1e-10)?;
    let z = fa.solve_vec(&t);
    let mut c = fa.inverse();
    symmetrize(&mut c);
    let log_marginal = -0.5 * t.dot(&z) - 0.5 * fa.logdet() + r_sum;
    if !log_marginal.is_finite() {
        return Err(GgpmError::NonFinite("Taylor log marginal".into()));
    }

    let mut grad = kernel_grad(&kernel.gram_gradients(x), &z, &c);
    let mut g_phi = 0.0;
    if lik.has_free_dispersion() {
        for i in 0..n {
            let tm = &terms[i];
            let (wi, u) = (w[i], tm.u());
            // direct phi-dependence at a fixed expansion point
            let dw = wi * wi * tm.d2_phi;
            let du = tm.d1_phi;
            let mut dt = du * wi + u * dw;
            let mut dr = tm.logp_phi + 0.5 * dw * u * u + wi * u * du + 0.5 * dw / wi;
            let mut dw_tot = dw;
            // movement of the expansion point with phi
            let de = points[i].deta_dphi;
            if de != 0.0 {
                let w_eta = wi * wi * tm.d3;
                dt += w_eta * u * de;
                dw_tot += w_eta * de;
                dr += (0.5 * w_eta * u * u + 0.5 * wi * tm.d3) * de;
            }
            g_phi += -z[i] * dt + 0.5 * (z[i] * z[i] - c[(i, i)]) * dw_tot + dr;
        }
        g_phi *= lik.dispersion();
    }
    grad.push(g_phi);

    let mean = &k * &z;
    let kc = &k * &c;
    let mut cov = &k - &kc * &k;
    symmetrize(&mut cov);

    let mut diagnostics = Diagnostics::new(EngineId::Taylor);
    diagnostics.agnostic_expansion = points.iter().any(|p| p.agnostic);
    Ok(InferenceResult {
        posterior: GaussianPosterior { mean, cov, sites: Some(SiteForm { w, t }) },
        log_marginal,
        grad,
        diagnostics,
        predictor: Predictor { alpha: z, r: c },
        state: EngineState::None,
    })
}
