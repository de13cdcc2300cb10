use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::fit::FitResult;
use super::GgpmModel;
use crate::efd::{Distribution, LikelihoodFamily, Link, Support};
use crate::error::{GgpmError, Result};
use crate::inference::{latent_predict, tilted_moments, InferenceResult};
use crate::numerics::quadrature::hermite_expect;

const MOMENT_ORDER: usize = 61;
const MAX_MOMENT_ORDER: usize = 488;

/// Predictive distribution of one test output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    lik: LikelihoodFamily,
    pub latent_mean: f64,
    pub latent_var: f64,
    pub mean: f64,
    pub var: f64,
    /// Mode of the pmf for count and fraction supports.
    pub mode: Option<f64>,
}

/// Mean and variance of y given eta.
fn conditional_moments(lik: &LikelihoodFamily, eta: f64) -> Result<(f64, f64)> {
    let phi = lik.dispersion();
    match lik.dist {
        Distribution::GammaScale => {
            let th = lik.link.theta(eta).theta;
            Ok((th, th * phi))
        }
        Distribution::Beta => {
            let th = lik.link.theta(eta).theta;
            Ok((th, th * (1.0 - th) * phi / (1.0 + phi)))
        }
        _ => Ok((lik.exact_mean(eta)?, lik.mean_and_variance(eta)?.1)),
    }
}

/// (E[mean], E[var], E[mean^2]) under N(m, v), doubling the Gauss-Hermite
/// order until successive estimates agree.
fn output_moments(lik: &LikelihoodFamily, m: f64, v: f64) -> Result<[f64; 3]> {
    if lik.dist == Distribution::Gaussian && lik.link == Link::Canonical {
        return Ok([m, lik.dispersion(), m * m + v]);
    }
    let eval = |order: usize| -> Result<[f64; 3]> {
        let mut err = None;
        let out = hermite_expect(
            |eta| match conditional_moments(lik, eta) {
                Ok((mu, var)) if mu.is_finite() && var.is_finite() => [mu, var, mu * mu],
                Ok(_) => {
                    err = Some(GgpmError::NonFinite("predictive moment integrand".into()));
                    [0.0; 3]
                }
                Err(e) => {
                    err = Some(e);
                    [0.0; 3]
                }
            },
            m,
            v,
            order,
        );
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    };
    let mut order = MOMENT_ORDER;
    let mut est = eval(order)?;
    while order < MAX_MOMENT_ORDER {
        order *= 2;
        let next = eval(order)?;
        let scale = [next[2].abs().sqrt(), next[1].abs(), next[2].abs()];
        let close = (0..3).all(|k| (next[k] - est[k]).abs() <= 1e-10 * scale[k].max(1e-300));
        est = next;
        if close {
            break;
        }
    }
    Ok(est)
}

impl PredictiveDistribution {
    pub fn new(lik: &LikelihoodFamily, latent_mean: f64, latent_var: f64) -> Result<Self> {
        let [mean, e_var, e_mean2] = output_moments(lik, latent_mean, latent_var)?;
        let var = (e_var + e_mean2 - mean * mean).max(0.0);
        let mut out = Self { lik: lik.clone(), latent_mean, latent_var, mean, var, mode: None };
        if lik.support().is_discrete() {
            out.mode = Some(out.scan_mode()?);
        }
        Ok(out)
    }

    pub fn likelihood(&self) -> &LikelihoodFamily {
        &self.lik
    }

    /// log p(y* | data); -inf outside the support.
    pub fn log_density(&self, y: f64) -> Result<f64> {
        if self.lik.check_support(y).is_err() {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(tilted_moments(&self.lik, y, self.latent_mean, self.latent_var)?.log_z)
    }

    pub fn density(&self, y: f64) -> Result<f64> {
        Ok(self.log_density(y)?.exp())
    }

    /// Point prediction: the mode for discrete supports, else the mean.
    pub fn point(&self) -> f64 {
        self.mode.unwrap_or(self.mean)
    }

    /// Hill-climbs the pmf from the support point nearest the mean.
    fn scan_mode(&self) -> Result<f64> {
        let (step, hi) = match self.lik.support() {
            Support::Fractions(n) => (1.0 / n as f64, n as f64),
            _ => (1.0, f64::INFINITY),
        };
        let to_y = |k: f64| k * step;
        let mut k = (self.mean / step).round().clamp(0.0, hi);
        let mut best = self.log_density(to_y(k))?;
        for dir in [1.0, -1.0] {
            loop {
                let next = k + dir;
                if next < 0.0 || next > hi {
                    break;
                }
                let v = self.log_density(to_y(next))?;
                if v > best {
                    best = v;
                    k = next;
                } else {
                    break;
                }
            }
        }
        Ok(to_y(k))
    }
}

/// Predictive distributions at the rows of `xstar` from an inference result
/// computed with `model`'s hyperparameters.
pub fn predict_with(
    model: &GgpmModel,
    result: &InferenceResult,
    xstar: &DMatrix<f64>,
) -> Result<Vec<PredictiveDistribution>> {
    if xstar.ncols() != model.x().ncols() {
        return Err(GgpmError::DimensionMismatch { expected: model.x().ncols(), found: xstar.ncols() });
    }
    latent_predict(result, &model.kernel, model.x(), xstar)?
        .into_iter()
        .map(|(m, v)| PredictiveDistribution::new(&model.lik, m, v))
        .collect()
}

pub fn predict(fit: &FitResult, xstar: &DMatrix<f64>) -> Result<Vec<PredictiveDistribution>> {
    predict_with(&fit.model, &fit.result, xstar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    /// Mean negative log predictive density.
    pub nlp: f64,
}

/// -log p(y_i* | data) for each test point.
pub fn nlp_contributions(pred: &[PredictiveDistribution], y: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != y.len() {
        return Err(GgpmError::DimensionMismatch { expected: pred.len(), found: y.len() });
    }
    pred.iter().zip(y).map(|(p, &v)| Ok(-p.log_density(v)?)).collect()
}

pub fn evaluate(pred: &[PredictiveDistribution], y: &[f64]) -> Result<Metrics> {
    if y.is_empty() {
        return Err(GgpmError::EmptyTestSet);
    }
    let nlp = nlp_contributions(pred, y)?;
    let n = y.len() as f64;
    let (mut mae, mut mse) = (0.0, 0.0);
    for (p, &v) in pred.iter().zip(y) {
        let e = p.point() - v;
        mae += e.abs();
        mse += e * e;
    }
    Ok(Metrics { mae: mae / n, mse: mse / n, nlp: nlp.iter().sum::<f64>() / n })
}
