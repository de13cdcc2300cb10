use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    check_data, kernel_grad, precision_form, symmetrize, Diagnostics, EngineId, EngineState, GaussianPosterior,
    InferenceResult, Predictor, SiteForm,
};
use crate::efd::{LikTerms, LikelihoodFamily};
use crate::error::{GgpmError, Result};
use crate::kernels::KernelSpec;
use crate::numerics::PsdFactor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceOptions {
    pub max_iter: usize,
    /// Convergence threshold on the sup-norm of the log-posterior gradient.
    pub tol: f64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8 }
    }
}

fn all_terms(lik: &LikelihoodFamily, y: &[f64], eta: &DVector<f64>) -> Result<Vec<LikTerms>> {
    y.iter().zip(eta.iter()).map(|(&yi, &e)| lik.terms_unchecked(yi, e)).collect()
}

/// Psi(a) = sum log p(y | K a) - a' K a / 2, or -inf where undefined.
fn objective(lik: &LikelihoodFamily, y: &[f64], k: &DMatrix<f64>, a: &DVector<f64>) -> (f64, DVector<f64>) {
    let eta = k * a;
    let mut s = -0.5 * a.dot(&eta);
    for (&yi, &e) in y.iter().zip(eta.iter()) {
        s += lik.log_likelihood_or_neg_inf(yi, e);
    }
    (if s.is_finite() { s } else { f64::NEG_INFINITY }, eta)
}

/// Laplace approximation: Newton iterations to the posterior mode, then a
/// Gaussian with the curvature there.
pub fn laplace_infer(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &LaplaceOptions,
) -> Result<InferenceResult> {
    check_data(lik, x, y)?;
    let n = y.len();
    let k = kernel.gram(x);
    let mut diagnostics = Diagnostics::new(EngineId::Laplace);

    let mut a = DVector::zeros(n);
    let (mut psi, mut eta) = objective(lik, y, &k, &a);
    if !psi.is_finite() {
        return Err(GgpmError::NonFinite("log-likelihood at the prior mean".into()));
    }
    let mut converged = false;
    let mut stalled = 0;
    let mut floor_steps = 0;
    for it in 0..=opts.max_iter {
        let terms = all_terms(lik, y, &eta)?;
        let u = DVector::from_iterator(n, terms.iter().map(|t| t.d1));
        let score = &u - &a;
        // a stalled objective with a small score is the rounding floor
        if score.amax() < opts.tol || (stalled >= 3 && score.amax() < opts.tol.max(1e-7)) {
            converged = true;
            diagnostics.iterations = it;
            break;
        }
        if it == opts.max_iter {
            diagnostics.iterations = it;
            break;
        }
        let w_raw = DVector::from_iterator(n, terms.iter().map(|t| -t.d2));
        if w_raw.iter().any(|w| *w < 0.0) {
            diagnostics.nonconcave_steps += 1;
        }
        let w = w_raw.map(|v| v.max(0.0));
        let sw = w.map(f64::sqrt);
        let mut b_mat = DMatrix::from_diagonal(&sw) * &k * DMatrix::from_diagonal(&sw);
        for i in 0..n {
            b_mat[(i, i)] += 1.0;
        }
        symmetrize(&mut b_mat);
        let fb = PsdFactor::new(&b_mat, 1e-12)?;
        // increment form of a_new = (I + W K)^-1 (W eta + u), free of the
        // cancellation between W eta and a
        let ks = &k * &score;
        let da = &score - sw.component_mul(&fb.solve_vec(&sw.component_mul(&ks)));

        // gains below the rounding noise of psi cannot be line-searched; the
        // full Newton step is taken and three in a row count as converged
        let phi = lik.dispersion();
        let noise: f64 = terms
            .iter()
            .zip(eta.iter())
            .map(|(t, e)| 16.0 * f64::EPSILON * (t.logp.abs() + phi * t.logp_phi.abs() + t.d2.abs() * (1.0 + e.abs())))
            .sum();
        let predicted = 0.5 * da.dot(&ks);
        if predicted.abs() <= 1e-12 * psi.abs().max(1.0) + noise {
            let cand = &a + &da;
            let (p, e) = objective(lik, y, &k, &cand);
            if p.is_finite() {
                a = cand;
                psi = p;
                eta = e;
                stalled += 1;
                floor_steps += 1;
                if floor_steps >= 3 {
                    converged = true;
                    diagnostics.iterations = it + 1;
                    break;
                }
                continue;
            }
        }
        floor_steps = 0;

        // backtracking on the step length
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-10 {
            let cand = &a + &da * step;
            let (p, e) = objective(lik, y, &k, &cand);
            if p >= psi {
                stalled = if p - psi <= 1e-14 * psi.abs().max(1.0) { stalled + 1 } else { 0 };
                a = cand;
                psi = p;
                eta = e;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            diagnostics.iterations = it + 1;
            break;
        }
    }
    if !converged {
        return Err(GgpmError::Convergence(format!(
            "Laplace mode search stopped after {} iterations",
            diagnostics.iterations
        )));
    }

    let terms = all_terms(lik, y, &eta)?;
    let w = DVector::from_iterator(n, terms.iter().map(|t| -t.d2));
    let fk = PsdFactor::new(&k, 1e-10)?;
    let l = fk.l();
    let pf = precision_form(&l, &w)
        .map_err(|_| GgpmError::Convergence("Laplace mode has an indefinite posterior curvature".into()))?;
    let v = pf.v;
    let log_marginal = terms.iter().map(|t| t.logp).sum::<f64>() - 0.5 * a.dot(&eta) - 0.5 * pf.logdet_b;
    if !log_marginal.is_finite() {
        return Err(GgpmError::NonFinite("Laplace log marginal".into()));
    }

    // R = W - W V W
    let wd = DMatrix::from_diagonal(&w);
    let mut r = &wd - &wd * &v * &wd;
    symmetrize(&mut r);
    // gradient of -log|B|/2 with respect to the mode
    let s2 = DVector::from_iterator(n, (0..n).map(|i| 0.5 * v[(i, i)] * terms[i].d3));
    // (I - V W)' s2 = s2 - W V s2
    let s2_back = &s2 - w.component_mul(&(&v * &s2));

    let dks = kernel.gram_gradients(x);
    let mut grad = kernel_grad(&dks, &a, &r);
    for (g, dk) in grad.iter_mut().zip(&dks) {
        *g += s2_back.dot(&(dk * &a));
    }
    let mut g_phi = 0.0;
    if lik.has_free_dispersion() {
        for (i, t) in terms.iter().enumerate() {
            g_phi += t.logp_phi + 0.5 * v[(i, i)] * t.d2_phi;
        }
        let d1_phi = DVector::from_iterator(n, terms.iter().map(|t| t.d1_phi));
        g_phi += s2_back.dot(&(&k * d1_phi));
        g_phi *= lik.dispersion();
    }
    grad.push(g_phi);

    let sites =
        SiteForm::from_natural(&w, &(w.component_mul(&eta) + DVector::from_iterator(n, terms.iter().map(|t| t.d1))));
    Ok(InferenceResult {
        posterior: GaussianPosterior { mean: eta, cov: v, sites },
        log_marginal,
        grad,
        diagnostics,
        predictor: Predictor { alpha: a.clone(), r },
        state: EngineState::Laplace { a },
    })
}
