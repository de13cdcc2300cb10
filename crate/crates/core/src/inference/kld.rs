use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    apply_hypers, check_data, symmetrize, Diagnostics, EngineId, EngineState, GaussianPosterior, InferenceResult,
    Predictor, SiteForm,
};
use crate::efd::{Distribution, LikelihoodFamily, Link};
use crate::error::{GgpmError, Result};
use crate::kernels::KernelSpec;
use crate::numerics::special::{ln_factorial, LN_SQRT_2PI};
use crate::numerics::{gauss_hermite, minimize, MinimizeOptions, PsdFactor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KldOptions {
    /// Gauss-Hermite order for the expected log-likelihoods.
    pub gh_order: usize,
    pub max_iter: usize,
    /// Infinity-norm gradient tolerance of the bound optimization.
    pub gtol: f64,
}

impl Default for KldOptions {
    fn default() -> Self {
        Self { gh_order: crate::numerics::quadrature::DEFAULT_ORDER, max_iter: 5000, gtol: 1e-8 }
    }
}

const MIN_LOG_LAMBDA: f64 = -30.0;

/// Variational parameters: m = K gamma and V = (K^-1 + diag(lambda))^-1.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub gamma: DVector<f64>,
    pub lambda: DVector<f64>,
}

/// E[log p(y | eta)] under eta ~ N(m, v) with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedLogLik {
    pub f: f64,
    pub dm: f64,
    pub dv: f64,
    pub dphi: f64,
}

/// Expected log-likelihood; closed forms for the Gaussian and canonical
/// Poisson likelihoods, Gauss-Hermite quadrature of the given order otherwise.
pub fn expected_log_lik(lik: &LikelihoodFamily, y: f64, m: f64, v: f64, order: usize) -> Result<ExpectedLogLik> {
    if !(v > 0.0 && v.is_finite() && m.is_finite()) {
        return Err(GgpmError::Parameter(format!("expected log-likelihood with m={m}, v={v}")));
    }
    match (lik.dist, lik.link) {
        (Distribution::Gaussian, Link::Canonical) => {
            let phi = lik.dispersion();
            let q = (y - m) * (y - m) + v;
            Ok(ExpectedLogLik {
                f: -LN_SQRT_2PI - 0.5 * phi.ln() - 0.5 * q / phi,
                dm: (y - m) / phi,
                dv: -0.5 / phi,
                dphi: -0.5 / phi + 0.5 * q / (phi * phi),
            })
        }
        (Distribution::Poisson, Link::Canonical) => {
            let e = (m + 0.5 * v).exp();
            if !e.is_finite() {
                return Err(GgpmError::Overflow(format!("Poisson expected rate at m={m}, v={v}")));
            }
            Ok(ExpectedLogLik { f: y * m - e - ln_factorial(y), dm: y - e, dv: -0.5 * e, dphi: 0.0 })
        }
        _ => expected_log_lik_quadrature(lik, y, m, v, order),
    }
}

/// Gauss-Hermite evaluation with the derivative-of-log-likelihood forms:
/// df/dm = E[u(eta)] and df/dv = E[u(eta) (eta - m)] / (2v).
pub fn expected_log_lik_quadrature(
    lik: &LikelihoodFamily,
    y: f64,
    m: f64,
    v: f64,
    order: usize,
) -> Result<ExpectedLogLik> {
    let rule = gauss_hermite(order);
    let s = (2.0 * v).sqrt();
    let norm = std::f64::consts::PI.sqrt().recip();
    let mut out = ExpectedLogLik { f: 0.0, dm: 0.0, dv: 0.0, dphi: 0.0 };
    for (x, w) in rule.nodes.iter().zip(rule.weights.iter()) {
        let t = lik.terms_unchecked(y, m + s * x)?;
        let wn = w * norm;
        out.f += wn * t.logp;
        out.dm += wn * t.d1;
        out.dv += wn * t.d1 * x / s;
        out.dphi += wn * t.logp_phi;
    }
    if !(out.f.is_finite() && out.dm.is_finite() && out.dv.is_finite()) {
        return Err(GgpmError::NonFinite("expected log-likelihood".into()));
    }
    Ok(out)
}

/// Alternative derivative forms by Gaussian integration by parts:
/// df/dm = E[log p (eta - m)] / v and df/dv = E[d2 log p] / 2.
pub fn expected_log_lik_alt_derivatives(
    lik: &LikelihoodFamily,
    y: f64,
    m: f64,
    v: f64,
    order: usize,
) -> Result<(f64, f64)> {
    let rule = gauss_hermite(order);
    let s = (2.0 * v).sqrt();
    let norm = std::f64::consts::PI.sqrt().recip();
    let (mut dm, mut dv) = (0.0, 0.0);
    for (x, w) in rule.nodes.iter().zip(rule.weights.iter()) {
        let t = lik.terms_unchecked(y, m + s * x)?;
        dm += w * norm * t.logp * s * x / v;
        dv += w * norm * 0.5 * t.d2;
    }
    Ok((dm, dv))
}

/// Bound pieces at fixed (m, lambda).
struct Bound {
    value: f64,
    v: DMatrix<f64>,
    lambda: DVector<f64>,
    ell: Vec<ExpectedLogLik>,
}

/// Evaluates everything except the prior quadratic term in m.
fn bound_parts(
    lik: &LikelihoodFamily,
    y: &[f64],
    k: &DMatrix<f64>,
    m: &DVector<f64>,
    rho: &[f64],
    order: usize,
) -> Result<Bound> {
    let n = y.len();
    if rho.iter().any(|r| !r.is_finite() || *r > 300.0) {
        return Err(GgpmError::NonFinite("variational precisions".into()));
    }
    let lambda = DVector::from_iterator(n, rho.iter().map(|r| r.exp()));
    let sl = lambda.map(f64::sqrt);
    let slk = DMatrix::from_diagonal(&sl) * k;
    let mut a = &slk * DMatrix::from_diagonal(&sl);
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    symmetrize(&mut a);
    let fa = PsdFactor::exact(&a)?;
    let q = fa.solve_lower(&slk);
    let mut v = k - q.transpose() * q;
    symmetrize(&mut v);
    let mut value = -0.5 * fa.logdet();
    let mut ell = Vec::with_capacity(n);
    for i in 0..n {
        let vi = v[(i, i)];
        if !(vi > 0.0) {
            return Err(GgpmError::NonFinite(format!("variational variance {vi}")));
        }
        let e = expected_log_lik(lik, y[i], m[i], vi, order)?;
        value += e.f + 0.5 * lambda[i] * vi;
        ell.push(e);
    }
    Ok(Bound { value, v, lambda, ell })
}

/// d bound / d rho.
fn rho_grad(b: &Bound) -> DVector<f64> {
    let n = b.lambda.len();
    let d = DVector::from_iterator(n, (0..n).map(|i| b.ell[i].dv + 0.5 * b.lambda[i]));
    let vv = b.v.component_mul(&b.v);
    let s = vv.transpose() * d;
    -b.lambda.component_mul(&s)
}

/// d bound / d (kernel log-params, log phi) with m = L beta held fixed
/// through beta, where L is the Cholesky factor of K.
fn hyper_grad(
    lik: &LikelihoodFamily,
    b: &Bound,
    l: &DMatrix<f64>,
    beta: &DVector<f64>,
    dks: &[DMatrix<f64>],
) -> Vec<f64> {
    let n = b.lambda.len();
    let gm = DVector::from_iterator(n, b.ell.iter().map(|e| e.dm));
    let d = DVector::from_iterator(n, (0..n).map(|i| b.ell[i].dv + 0.5 * b.lambda[i]));
    // P = I - Lambda V; M = P D P' - (Lambda - Lambda V Lambda) / 2
    let ld = DMatrix::from_diagonal(&b.lambda);
    let lv = &ld * &b.v;
    let p = DMatrix::identity(n, n) - &lv;
    let mut mm = &p * DMatrix::from_diagonal(&d) * p.transpose() - 0.5 * (&ld - &lv * &ld);
    symmetrize(&mut mm);
    let l_inv = l.clone().solve_lower_triangular(&DMatrix::identity(n, n)).unwrap_or_else(|| DMatrix::zeros(n, n));
    let mut out: Vec<f64> = dks
        .iter()
        .map(|dk| {
            // derivative of the Cholesky factor: dL = L lower_half(L^-1 dK L^-T)
            let mut x = &l_inv * dk * l_inv.transpose();
            for i in 0..n {
                x[(i, i)] *= 0.5;
                for j in i + 1..n {
                    x[(i, j)] = 0.0;
                }
            }
            let dl = l * x;
            gm.dot(&(dl * beta)) + mm.component_mul(dk).sum()
        })
        .collect();
    let g_phi =
        if lik.has_free_dispersion() { b.ell.iter().map(|e| e.dphi).sum::<f64>() * lik.dispersion() } else { 0.0 };
    out.push(g_phi);
    out
}

fn initial_rho(lik: &LikelihoodFamily, y: &[f64]) -> Vec<f64> {
    y.iter()
        .map(|&yi| {
            let w =
                lik.canonical_expansion_point(yi).and_then(|p| lik.terms(yi, p.eta)).map(|t| t.w()).unwrap_or(f64::NAN);
            if w > 0.0 && w.is_finite() {
                (1.0 / w).ln().clamp(-20.0, 20.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Variational inference from gamma = 0 and Taylor-curvature precisions.
pub fn kld_infer(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &KldOptions,
) -> Result<InferenceResult> {
    kld_infer_from(lik, kernel, x, y, opts, None)
}

/// Variational inference, optionally warm-started.
pub fn kld_infer_from(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &KldOptions,
    init: Option<&VariationalParams>,
) -> Result<InferenceResult> {
    check_data(lik, x, y)?;
    let n = y.len();
    let k = kernel.gram(x);
    let l = PsdFactor::new(&k, 1e-10)?.l();
    let (beta0, rho0) = match init {
        Some(p) => {
            if p.gamma.len() != n || p.lambda.len() != n {
                return Err(GgpmError::DimensionMismatch { expected: n, found: p.gamma.len() });
            }
            (l.transpose() * &p.gamma, p.lambda.iter().map(|v| v.max(1e-300).ln()).collect())
        }
        None => (DVector::zeros(n), initial_rho(lik, y)),
    };
    let ctx = Inner { lik, y, k: &k, l: &l, order: opts.gh_order };
    let (beta, rho, iterations, converged) = ctx.maximize(beta0, rho0, opts)?;
    let mut diagnostics = Diagnostics::new(EngineId::Kld);
    diagnostics.iterations = iterations;
    diagnostics.converged = converged;
    finish(lik, kernel, x, y, &k, &l, &beta, &rho, opts.gh_order, diagnostics)
}

struct Inner<'a> {
    lik: &'a LikelihoodFamily,
    y: &'a [f64],
    k: &'a DMatrix<f64>,
    l: &'a DMatrix<f64>,
    order: usize,
}

struct Point {
    beta: DVector<f64>,
    rho: Vec<f64>,
    value: f64,
    bound: Bound,
}

impl Inner<'_> {
    fn eval(&self, beta: DVector<f64>, rho: Vec<f64>) -> Result<Point> {
        let m = self.l * &beta;
        let bound = bound_parts(self.lik, self.y, self.k, &m, &rho, self.order)?;
        let value = bound.value - 0.5 * beta.dot(&beta);
        if !value.is_finite() {
            return Err(GgpmError::NonFinite("variational bound".into()));
        }
        Ok(Point { beta, rho, value, bound })
    }

    fn grads(&self, p: &Point) -> (DVector<f64>, DVector<f64>) {
        let n = self.y.len();
        let gm = DVector::from_iterator(n, p.bound.ell.iter().map(|e| e.dm));
        (self.l.transpose() * gm - &p.beta, rho_grad(&p.bound))
    }

    /// Newton ascent over beta and the precisions off the floor, with a
    /// finite-difference Hessian of the analytic gradient.
    fn newton_polish(&self, mut p: Point, gtol: f64, max_iter: usize) -> Result<(Point, usize, bool)> {
        let n = self.y.len();
        let floor = MIN_LOG_LAMBDA + 1.0;
        for it in 0..max_iter {
            let free: Vec<usize> = (0..n).filter(|&j| p.rho[j] > floor).collect();
            let (gb, gr) = self.grads(&p);
            let dim = n + free.len();
            let g = DVector::from_iterator(dim, gb.iter().copied().chain(free.iter().map(|&j| gr[j])));
            if g.amax() < gtol {
                return Ok((p, it, true));
            }
            let h_step = 1e-6;
            let mut h = DMatrix::zeros(dim, dim);
            for c in 0..dim {
                let mut beta = p.beta.clone();
                let mut rho = p.rho.clone();
                if c < n {
                    beta[c] += h_step;
                } else {
                    rho[free[c - n]] += h_step;
                }
                let q = self.eval(beta, rho)?;
                let (qb, qr) = self.grads(&q);
                for r in 0..dim {
                    let gq = if r < n { qb[r] } else { qr[free[r - n]] };
                    h[(r, c)] = (gq - g[r]) / h_step;
                }
            }
            let mut neg = -h;
            symmetrize(&mut neg);
            let eig = neg.symmetric_eigen();
            let top = eig.eigenvalues.amax().max(1e-12);
            let vals = eig.eigenvalues.map(|e| e.max(1e-8 * top));
            let coef = eig.eigenvectors.transpose() * &g;
            let step = &eig.eigenvectors * coef.component_div(&vals);
            // Newton decrement: the predicted gain of a full step
            if 0.5 * g.dot(&step) < 1e-9 * p.value.abs().max(1.0) {
                return Ok((p, it, true));
            }
            let db = step.rows(0, n).into_owned();
            let mut dr = vec![0.0; n];
            for (k, &j) in free.iter().enumerate() {
                dr[j] = step[n + k].clamp(-5.0, 5.0);
                if p.rho[j] + dr[j] <= floor {
                    dr[j] = MIN_LOG_LAMBDA - p.rho[j];
                }
            }
            match self.search(&p, Some(&db), Some(&dr)) {
                Some(q) if q.value > p.value || g.amax() < gtol.max(1e-7) => p = q,
                _ => return Ok((p, it + 1, g.amax() < gtol.max(1e-7))),
            }
        }
        let (gb, gr) = self.grads(&p);
        let gmax = (0..n).filter(|&j| p.rho[j] > floor).fold(gb.amax(), |m, j| m.max(gr[j].abs()));
        Ok((p, max_iter, gmax < gtol))
    }

    /// Tries a step from `p` along `dir` with halving until the bound
    /// does not decrease.
    fn search(&self, p: &Point, db: Option<&DVector<f64>>, dr: Option<&[f64]>) -> Option<Point> {
        let mut s = 1.0;
        for _ in 0..30 {
            let beta = match db {
                Some(d) => &p.beta + d * s,
                None => p.beta.clone(),
            };
            let rho = match dr {
                Some(d) => p.rho.iter().zip(d).map(|(r, d)| r + s * d).collect(),
                None => p.rho.clone(),
            };
            if let Ok(c) = self.eval(beta, rho) {
                if c.value >= p.value {
                    return Some(c);
                }
            }
            s *= 0.5;
        }
        None
    }

    /// Alternates Newton steps in beta with fixed-point steps
    /// lambda = -2 df/dv, then polishes with L-BFGS if needed.
    fn maximize(
        &self,
        beta0: DVector<f64>,
        rho0: Vec<f64>,
        opts: &KldOptions,
    ) -> Result<(DVector<f64>, Vec<f64>, usize, bool)> {
        let n = self.y.len();
        let mut p = self.eval(beta0, rho0)?;
        let mut it = 0;
        let mut converged = false;
        let mut best = f64::INFINITY;
        let mut stalled = 0;
        while it < opts.max_iter {
            let (gb, gr) = self.grads(&p);
            let gnorm = gb.amax().max(gr.amax());
            if gnorm < opts.gtol {
                converged = true;
                break;
            }
            // stop when the gradient no longer shrinks: the rounding floor
            // when it is small, otherwise hand over to L-BFGS
            if gnorm < 0.5 * best {
                best = gnorm;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= 3 {
                    converged = gnorm < opts.gtol.max(1e-7);
                    break;
                }
            }
            it += 1;
            let c = DVector::from_iterator(n, p.bound.ell.iter().map(|e| (-2.0 * e.dv).max(0.0)));
            let mut h = self.l.transpose() * DMatrix::from_diagonal(&c) * self.l;
            for i in 0..n {
                h[(i, i)] += 1.0;
            }
            symmetrize(&mut h);
            if let Ok(fh) = PsdFactor::new(&h, 1e-12) {
                let db = fh.solve_vec(&gb);
                if let Some(q) = self.search(&p, Some(&db), None) {
                    p = q;
                }
            }
            let dr: Vec<f64> = lambda_targets(&p.bound)
                .iter()
                .zip(&p.rho)
                .map(|(t, r)| match t {
                    Some(l) => (l.ln().max(MIN_LOG_LAMBDA) - r).clamp(-5.0, 5.0),
                    None => 0.0,
                })
                .collect();
            if let Some(q) = self.search(&p, None, Some(&dr)) {
                p = q;
            }
            // a nonnegative df/dv puts the optimum on the lambda = 0 boundary
            let dr: Vec<f64> = p
                .bound
                .ell
                .iter()
                .zip(lambda_targets(&p.bound))
                .zip(&p.rho)
                .map(|((_, t), r)| if t.is_none() { MIN_LOG_LAMBDA - r } else { 0.0 })
                .collect();
            if dr.iter().any(|d| *d < 0.0) {
                if let Some(q) = self.search(&p, None, Some(&dr)) {
                    p = q;
                }
            }
        }
        if !converged {
            let (q, used, ok) = self.newton_polish(p, opts.gtol, 50)?;
            p = q;
            it += used;
            converged = ok;
        }
        if !converged {
            let mut x0: Vec<f64> = p.beta.iter().copied().collect();
            x0.extend_from_slice(&p.rho);
            let objective = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
                let q = self.eval(DVector::from_column_slice(&v[..n]), v[n..].to_vec())?;
                let (gb, gr) = self.grads(&q);
                Ok((-q.value, gb.iter().chain(gr.iter()).map(|g| -g).collect()))
            };
            let mopts = MinimizeOptions {
                gtol: opts.gtol,
                max_iter: opts.max_iter.saturating_sub(it).max(1),
                ftol: 0.0,
                ..Default::default()
            };
            if let Some(res) = minimize(objective, &x0, &mopts) {
                it += res.iterations;
                converged = res.converged() || res.grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < opts.gtol;
                if -res.value >= p.value {
                    p = self.eval(DVector::from_column_slice(&res.x[..n]), res.x[n..].to_vec())?;
                }
            }
        }
        Ok((p.beta, p.rho, it, converged))
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
    beta: &DVector<f64>,
    rho: &[f64],
    order: usize,
    diagnostics: Diagnostics,
) -> Result<InferenceResult> {
    let m = l * beta;
    let b = bound_parts(lik, y, k, &m, rho, order)?;
    let log_marginal = b.value - 0.5 * beta.dot(beta);
    let grad = hyper_grad(lik, &b, l, beta, &kernel.gram_gradients(x));
    let gamma = l.transpose().solve_upper_triangular(beta).unwrap_or_else(|| DVector::zeros(beta.len()));
    let ld = DMatrix::from_diagonal(&b.lambda);
    let mut r = &ld - &ld * &b.v * &ld;
    symmetrize(&mut r);
    // t = W (K^-1 + Lambda) m = gamma / lambda + m
    let shift = &gamma + b.lambda.component_mul(&m);
    let sites = SiteForm::from_natural(&b.lambda, &shift);
    Ok(InferenceResult {
        posterior: GaussianPosterior { mean: m, cov: b.v, sites },
        log_marginal,
        grad,
        diagnostics,
        predictor: Predictor { alpha: gamma.clone(), r },
        state: EngineState::Kld(VariationalParams { gamma, lambda: b.lambda }),
    })
}

/// Joint objective over (log hyperparameters, beta, log lambda), with
/// m = L beta for the Cholesky factor L of K. Returns the bound and its
/// gradient in the same layout.
pub fn kld_joint_objective(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    params: &[f64],
    order: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = y.len();
    let nh = kernel.n_params() + 1;
    if params.len() != nh + 2 * n {
        return Err(GgpmError::DimensionMismatch { expected: nh + 2 * n, found: params.len() });
    }
    let (lik, kernel) = apply_hypers(lik, kernel, &params[..nh])?;
    let k = kernel.gram(x);
    let l = PsdFactor::new(&k, 1e-10)?.l();
    let beta = DVector::from_column_slice(&params[nh..nh + n]);
    let m = &l * &beta;
    let b = bound_parts(&lik, y, &k, &m, &params[nh + n..], order)?;
    let value = b.value - 0.5 * beta.dot(&beta);
    let mut grad = hyper_grad(&lik, &b, &l, &beta, &kernel.gram_gradients(x));
    let gm = DVector::from_iterator(n, b.ell.iter().map(|e| e.dm));
    grad.extend((l.transpose() * gm - &beta).iter());
    grad.extend(rho_grad(&b).iter());
    Ok((value, grad))
}

/// Inference result at given joint parameters (see [`kld_joint_objective`]).
pub fn kld_result_at(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    params: &[f64],
    order: usize,
    diagnostics: Diagnostics,
) -> Result<InferenceResult> {
    let n = y.len();
    let nh = kernel.n_params() + 1;
    let (lik, kernel) = apply_hypers(lik, kernel, &params[..nh])?;
    let k = kernel.gram(x);
    let l = PsdFactor::new(&k, 1e-10)?.l();
    let beta = DVector::from_column_slice(&params[nh..nh + n]);
    finish(&lik, &kernel, x, y, &k, &l, &beta, &params[nh + n..], order, diagnostics)
}

/// Fixed-point precisions lambda_i = -2 df/dv_i; None where df/dv >= 0
/// puts the site on the lambda = 0 boundary.
fn lambda_targets(b: &Bound) -> Vec<Option<f64>> {
    b.ell.iter().map(|e| if e.dv < 0.0 { Some(-2.0 * e.dv) } else { None }).collect()
}

/// Whitened starting coordinates (beta, log lambda) for the joint objective.
pub fn kld_initial_coordinates(lik: &LikelihoodFamily, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    out.extend(initial_rho(lik, y));
    out
}
