//! Maps from the latent value eta to the natural parameter theta.

use serde::{Deserialize, Serialize};

use crate::error::{GgpmError, Result};
use crate::numerics::special::{inv_mills, log1m_exp, log_expm1, log_norm_cdf, logit, sigmoid, softplus};

/// Range of theta(eta) over finite eta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaRange {
    Reals,
    Negative,
    Positive,
    UnitInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// theta = eta
    Canonical,
    /// theta = -exp(-eta)
    NegExp,
    /// theta = exp(eta)
    Exp,
    /// theta = 1 / (1 + exp(-eta))
    Logistic,
    /// theta = -log(1 + exp(-eta))
    FlippedLogLoss,
    /// theta = log(log(1 + exp(eta)))
    LinearizedLogLoss,
    /// theta = log Phi(eta) - log Phi(-eta)
    Probit,
}

/// theta and its first three derivatives with respect to eta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaDerivs {
    pub theta: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        x - 0.5 * x.exp()
    } else {
        softplus(x).ln()
    }
}

impl Link {
    pub const ALL: [Link; 7] = [
        Link::Canonical,
        Link::NegExp,
        Link::Exp,
        Link::Logistic,
        Link::FlippedLogLoss,
        Link::LinearizedLogLoss,
        Link::Probit,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Link::Canonical => "canonical",
            Link::NegExp => "neg-exp",
            Link::Exp => "exp",
            Link::Logistic => "logistic",
            Link::FlippedLogLoss => "flipped-log-loss",
            Link::LinearizedLogLoss => "linearized-log-loss",
            Link::Probit => "probit",
        }
    }

    pub fn from_name(name: &str) -> Result<Link> {
        Link::ALL
            .iter()
            .copied()
            .find(|l| l.name() == name)
            .ok_or_else(|| GgpmError::UnknownId(format!("link '{name}'")))
    }

    pub fn range(&self) -> ThetaRange {
        match self {
            Link::Canonical | Link::LinearizedLogLoss | Link::Probit => ThetaRange::Reals,
            Link::NegExp | Link::FlippedLogLoss => ThetaRange::Negative,
            Link::Exp => ThetaRange::Positive,
            Link::Logistic => ThetaRange::UnitInterval,
        }
    }

    /// theta(eta) and derivatives.
    pub fn theta(&self, eta: f64) -> ThetaDerivs {
        match self {
            Link::Canonical => ThetaDerivs { theta: eta, d1: 1.0, d2: 0.0, d3: 0.0 },
            Link::NegExp => {
                let e = (-eta).exp();
                ThetaDerivs { theta: -e, d1: e, d2: -e, d3: e }
            }
            Link::Exp => {
                let e = eta.exp();
                ThetaDerivs { theta: e, d1: e, d2: e, d3: e }
            }
            Link::Logistic => {
                let s = sigmoid(eta);
                let v = s * sigmoid(-eta);
                ThetaDerivs { theta: s, d1: v, d2: v * (1.0 - 2.0 * s), d3: v * (1.0 - 6.0 * v) }
            }
            Link::FlippedLogLoss => {
                let s = sigmoid(eta);
                let sm = sigmoid(-eta);
                let v = s * sm;
                ThetaDerivs { theta: -softplus(-eta), d1: sm, d2: -v, d3: -v * (1.0 - 2.0 * s) }
            }
            Link::LinearizedLogLoss => {
                let s = sigmoid(eta);
                let sm = sigmoid(-eta);
                let ls = log_softplus(eta);
                // theta' = sigmoid / softplus, computed in log space
                let t1 = (-softplus(-eta) - ls).exp();
                ThetaDerivs {
                    theta: ls,
                    d1: t1,
                    d2: t1 * sm - t1 * t1,
                    d3: t1 * sm * (1.0 - 2.0 * s) - 3.0 * t1 * t1 * sm + 2.0 * t1 * t1 * t1,
                }
            }
            Link::Probit => {
                let rp = inv_mills(eta);
                let rm = inv_mills(-eta);
                let dp = -rp * (eta + rp);
                let dm = -rm * (-eta + rm);
                let ddp = -dp * (eta + 2.0 * rp) - rp;
                let ddm = -dm * (-eta + 2.0 * rm) - rm;
                ThetaDerivs { theta: log_norm_cdf(eta) - log_norm_cdf(-eta), d1: rp + rm, d2: dp - dm, d3: ddp + ddm }
            }
        }
    }

    /// Inverse map theta -> eta, returning (eta, d eta / d theta).
    pub fn inverse(&self, theta: f64) -> Result<(f64, f64)> {
        let bad = || GgpmError::Parameter(format!("theta={theta} outside the range of link {}", self.name()));
        let eta = match self {
            Link::Canonical => theta,
            Link::NegExp => {
                if !(theta < 0.0) {
                    return Err(bad());
                }
                -(-theta).ln()
            }
            Link::Exp => {
                if !(theta > 0.0) {
                    return Err(bad());
                }
                theta.ln()
            }
            Link::Logistic => {
                if !(theta > 0.0 && theta < 1.0) {
                    return Err(bad());
                }
                logit(theta)
            }
            Link::FlippedLogLoss => {
                if !(theta < 0.0) {
                    return Err(bad());
                }
                theta - log1m_exp(theta)
            }
            Link::LinearizedLogLoss => {
                if !theta.is_finite() {
                    return Err(bad());
                }
                if theta < -30.0 {
                    // log(expm1(e^theta)) for tiny e^theta
                    theta + (0.5 * theta.exp()).ln_1p()
                } else {
                    log_expm1(theta.exp())
                }
            }
            Link::Probit => {
                if !theta.is_finite() {
                    return Err(bad());
                }
                self.solve_monotone(theta)?
            }
        };
        if !eta.is_finite() {
            return Err(bad());
        }
        let d1 = self.theta(eta).d1;
        Ok((eta, 1.0 / d1))
    }

    fn solve_monotone(&self, theta: f64) -> Result<f64> {
        let f = |e: f64| self.theta(e).theta - theta;
        let (mut lo, mut hi) = (-1.0, 1.0);
        while f(lo) > 0.0 {
            lo *= 2.0;
            if lo < -1e6 {
                return Err(GgpmError::Convergence("link inversion".into()));
            }
        }
        while f(hi) < 0.0 {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(GgpmError::Convergence("link inversion".into()));
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let t = self.theta(x);
            let fx = t.theta - theta;
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let newton = x - fx / t.d1;
            let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
                return Ok(next);
            }
            x = next;
        }
        Ok(x)
    }
}
