//! Approximate inference engines. Each maps (likelihood, kernel, data) to a
//! Gaussian posterior over the latent values, an approximate log marginal
//! likelihood and its gradient with respect to the log kernel
//! hyperparameters followed by log phi.

mod ep;
mod kld;
mod laplace;
mod taylor;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use ep::{ep_infer, ep_infer_from, tilted_moments, EpOptions, EpSites, TiltedMoments};
pub use kld::{
    expected_log_lik, expected_log_lik_alt_derivatives, expected_log_lik_quadrature, kld_infer, kld_infer_from,
    kld_initial_coordinates, kld_joint_objective, kld_result_at, ExpectedLogLik, KldOptions, VariationalParams,
};
pub use laplace::{laplace_infer, LaplaceOptions};
pub use taylor::{taylor_infer, Expansion};

use crate::efd::LikelihoodFamily;
use crate::error::{GgpmError, Result};
use crate::kernels::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineId {
    Taylor,
    Laplace,
    Ep,
    Kld,
}

impl EngineId {
    pub const ALL: [EngineId; 4] = [EngineId::Taylor, EngineId::Laplace, EngineId::Ep, EngineId::Kld];

    pub fn name(&self) -> &'static str {
        match self {
            EngineId::Taylor => "taylor",
            EngineId::Laplace => "laplace",
            EngineId::Ep => "ep",
            EngineId::Kld => "kld",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        EngineId::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| GgpmError::UnknownId(format!("engine '{s}'")))
    }
}

/// Expansion-point rule for the Taylor engine in configuration form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionRule {
    #[default]
    Canonical,
    Agnostic,
}

/// Engine choice with its options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum Engine {
    Taylor { expansion: ExpansionRule },
    Laplace(LaplaceOptions),
    Ep(EpOptions),
    Kld(KldOptions),
}

impl Engine {
    pub fn default_for(id: EngineId) -> Self {
        match id {
            EngineId::Taylor => Engine::Taylor { expansion: ExpansionRule::Canonical },
            EngineId::Laplace => Engine::Laplace(LaplaceOptions::default()),
            EngineId::Ep => Engine::Ep(EpOptions::default()),
            EngineId::Kld => Engine::Kld(KldOptions::default()),
        }
    }

    pub fn id(&self) -> EngineId {
        match self {
            Engine::Taylor { .. } => EngineId::Taylor,
            Engine::Laplace(_) => EngineId::Laplace,
            Engine::Ep(_) => EngineId::Ep,
            Engine::Kld(_) => EngineId::Kld,
        }
    }
}

/// Approximate posterior N(mean, cov) over the training latents.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// (W, t) with cov = (K^-1 + W^-1)^-1 and mean = cov W^-1 t, when every
    /// site precision is nonzero and finite.
    pub sites: Option<SiteForm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteForm {
    pub w: DVector<f64>,
    pub t: DVector<f64>,
}

impl SiteForm {
    /// Builds (W, t) from site precisions and precision-weighted means.
    pub fn from_natural(precision: &DVector<f64>, shift: &DVector<f64>) -> Option<Self> {
        if precision.iter().any(|p| *p == 0.0 || !p.is_finite()) {
            return None;
        }
        let w = precision.map(|p| 1.0 / p);
        let t = shift.component_mul(&w);
        Some(Self { w, t })
    }
}

/// Quantities for latent prediction: mu* = k*' alpha and
/// var* = k** - k*' R k*.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub alpha: DVector<f64>,
    pub r: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: EngineId,
    pub iterations: usize,
    pub converged: bool,
    /// EP site updates skipped for an improper cavity or update.
    pub skipped_updates: usize,
    /// Laplace iterations where negative curvature had to be clipped.
    pub nonconcave_steps: usize,
    /// Taylor engine: the likelihood-agnostic point was used somewhere.
    pub agnostic_expansion: bool,
}

impl Diagnostics {
    pub fn new(method: EngineId) -> Self {
        Self {
            method,
            iterations: 0,
            converged: true,
            skipped_updates: 0,
            nonconcave_steps: 0,
            agnostic_expansion: false,
        }
    }
}

/// Engine-specific state that can warm-start a later run.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineState {
    None,
    Laplace { a: DVector<f64> },
    Ep(EpSites),
    Kld(VariationalParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub posterior: GaussianPosterior,
    pub log_marginal: f64,
    /// d log_marginal / d (log kernel hyperparameters..., log phi)
    pub grad: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub predictor: Predictor,
    pub state: EngineState,
}

/// Runs the selected engine.
pub fn infer(
    engine: &Engine,
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
) -> Result<InferenceResult> {
    match engine {
        Engine::Taylor { expansion } => {
            let e = match expansion {
                ExpansionRule::Canonical => Expansion::Canonical,
                ExpansionRule::Agnostic => Expansion::Agnostic,
            };
            taylor_infer(lik, kernel, x, y, &e)
        }
        Engine::Laplace(o) => laplace_infer(lik, kernel, x, y, o),
        Engine::Ep(o) => ep_infer(lik, kernel, x, y, o),
        Engine::Kld(o) => kld_infer(lik, kernel, x, y, o),
    }
}

/// Bound on the magnitude of a free log-dispersion coordinate.
pub const MAX_LOG_DISPERSION: f64 = 20.0;

/// Splits a hyperparameter vector (log kernel params..., log phi) and
/// rebuilds the likelihood and kernel.
pub fn apply_hypers(
    lik: &LikelihoodFamily,
    kernel: &KernelSpec,
    hypers: &[f64],
) -> Result<(LikelihoodFamily, KernelSpec)> {
    let nk = kernel.n_params();
    if hypers.len() != nk + 1 {
        return Err(GgpmError::DimensionMismatch { expected: nk + 1, found: hypers.len() });
    }
    if hypers.iter().any(|h| !h.is_finite()) {
        return Err(GgpmError::NonFinite("hyperparameters".into()));
    }
    if lik.dist.fixed_dispersion().is_none() && hypers[nk].abs() > MAX_LOG_DISPERSION {
        return Err(GgpmError::Parameter(format!(
            "log dispersion {} outside [-{MAX_LOG_DISPERSION}, {MAX_LOG_DISPERSION}]",
            hypers[nk]
        )));
    }
    Ok((lik.with_log_dispersion(hypers[nk])?, kernel.with_params(&hypers[..nk])?))
}

/// Current hyperparameter vector (log kernel params..., log phi).
pub fn current_hypers(lik: &LikelihoodFamily, kernel: &KernelSpec) -> Vec<f64> {
    let mut h = kernel.params();
    h.push(lik.dispersion().ln());
    h
}

/// Latent predictive mean and variance at each row of `xstar`.
pub fn latent_predict(
    result: &InferenceResult,
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    xstar: &DMatrix<f64>,
) -> Result<Vec<(f64, f64)>> {
    let ks = kernel.cross(x, xstar)?;
    let kss = kernel.diag(xstar);
    let p = &result.predictor;
    let mean = ks.transpose() * &p.alpha;
    let rk = &p.r * &ks;
    let out = (0..xstar.nrows())
        .map(|j| {
            let v = kss[j] - ks.column(j).dot(&rk.column(j));
            // clamp rounding noise into (0, k**]
            let v = v.min(kss[j]).max(kss[j] * 1e-15).max(1e-300);
            (mean[j], v)
        })
        .collect();
    Ok(out)
}

pub fn check_data(lik: &LikelihoodFamily, x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(GgpmError::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    if y.is_empty() {
        return Err(GgpmError::Parameter("no training data".into()));
    }
    for v in y {
        lik.check_support(*v)?;
    }
    Ok(())
}

/// 0.5 a' dK a - 0.5 tr(R dK) for each gradient matrix.
pub(crate) fn kernel_grad(dks: &[DMatrix<f64>], alpha: &DVector<f64>, r: &DMatrix<f64>) -> Vec<f64> {
    dks.iter().map(|dk| 0.5 * alpha.dot(&(dk * alpha)) - 0.5 * r.component_mul(dk).sum()).collect()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Factor of B = I + L' diag(s) L for K = L L', with V = L B^-1 L'.
pub(crate) struct PrecisionForm {
    pub logdet_b: f64,
    pub v: DMatrix<f64>,
}

pub(crate) fn precision_form(l: &DMatrix<f64>, s: &DVector<f64>) -> Result<PrecisionForm> {
    let n = l.nrows();
    let mut b = l.transpose() * DMatrix::from_diagonal(s) * l;
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    symmetrize(&mut b);
    let fb = crate::numerics::PsdFactor::exact(&b)?;
    let q = fb.solve_lower(&l.transpose());
    let mut v = q.transpose() * q;
    symmetrize(&mut v);
    Ok(PrecisionForm { logdet_b: fb.logdet(), v })
}
