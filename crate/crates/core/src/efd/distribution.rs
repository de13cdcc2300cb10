//! Exponential-family distributions p(y|theta, phi) =
//! exp{(T(y) theta - b(theta)) / a(phi) + c(phi, y)}.

use serde::{Deserialize, Serialize};

use super::com_poisson::com_series;
use super::link::ThetaRange;
use crate::error::{GgpmError, Result};
use crate::numerics::special::{
    digamma, inverse_digamma, ln_factorial, ln_gamma, logit, sigmoid, softplus, tetragamma, trigamma, LN_SQRT_2PI,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Gaussian,
    GammaShape,
    GammaScale,
    InverseGaussian,
    NegativeBinomial,
    Poisson,
    ComPoisson,
    Binomial { trials: u32 },
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Reals,
    PositiveReals,
    UnitInterval,
    Counts,
    Fractions(u32),
}

impl Support {
    pub fn describe(&self) -> String {
        match self {
            Support::Reals => "real numbers".into(),
            Support::PositiveReals => "positive reals".into(),
            Support::UnitInterval => "open unit interval (0, 1)".into(),
            Support::Counts => "counts 0, 1, 2, ...".into(),
            Support::Fractions(n) => format!("fractions k/{n} for k = 0..{n}"),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Support::Counts | Support::Fractions(_))
    }
}

/// a(phi), b(theta) and the partial derivatives the inference engines need.
/// All phi-derivatives are with respect to phi itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct Partition {
    pub a: f64,
    pub a_phi: f64,
    pub b: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b_phi: f64,
    pub b1_phi: f64,
    pub b2_phi: f64,
}

fn poly_at(x: f64) -> (f64, f64, f64, f64) {
    (ln_gamma(x), digamma(x), trigamma(x), tetragamma(x))
}

impl Distribution {
    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Gaussian => "gaussian",
            Distribution::GammaShape => "gamma-shape",
            Distribution::GammaScale => "gamma-scale",
            Distribution::InverseGaussian => "inverse-gaussian",
            Distribution::NegativeBinomial => "negative-binomial",
            Distribution::Poisson => "poisson",
            Distribution::ComPoisson => "com-poisson",
            Distribution::Binomial { .. } => "binomial",
            Distribution::Beta => "beta",
        }
    }

    pub fn support(&self) -> Support {
        match self {
            Distribution::Gaussian => Support::Reals,
            Distribution::GammaShape | Distribution::GammaScale | Distribution::InverseGaussian => {
                Support::PositiveReals
            }
            Distribution::NegativeBinomial | Distribution::Poisson | Distribution::ComPoisson => Support::Counts,
            Distribution::Binomial { trials } => Support::Fractions(*trials),
            Distribution::Beta => Support::UnitInterval,
        }
    }

    /// Valid natural-parameter range.
    pub fn theta_domain(&self) -> ThetaRange {
        match self {
            Distribution::Gaussian
            | Distribution::Poisson
            | Distribution::ComPoisson
            | Distribution::Binomial { .. } => ThetaRange::Reals,
            Distribution::GammaShape | Distribution::InverseGaussian | Distribution::NegativeBinomial => {
                ThetaRange::Negative
            }
            Distribution::GammaScale => ThetaRange::Positive,
            Distribution::Beta => ThetaRange::UnitInterval,
        }
    }

    /// Whether phi is a free parameter (Poisson and binomial fix it).
    pub fn has_free_dispersion(&self) -> bool {
        !matches!(self, Distribution::Poisson | Distribution::Binomial { .. })
    }

    /// The dispersion value used when it is not free.
    pub fn fixed_dispersion(&self) -> Option<f64> {
        match self {
            Distribution::Poisson => Some(1.0),
            Distribution::Binomial { trials } => Some(1.0 / *trials as f64),
            _ => None,
        }
    }

    pub fn check_theta(&self, theta: f64) -> Result<()> {
        let ok = match self.theta_domain() {
            ThetaRange::Reals => theta.is_finite(),
            ThetaRange::Negative => theta < 0.0 && theta.is_finite(),
            ThetaRange::Positive => theta > 0.0 && theta.is_finite(),
            ThetaRange::UnitInterval => theta > 0.0 && theta < 1.0,
        };
        if ok {
            Ok(())
        } else if !theta.is_finite() {
            Err(GgpmError::Overflow(format!("{} natural parameter", self.name())))
        } else {
            Err(GgpmError::Parameter(format!("theta={theta} outside the {} parameter range", self.name())))
        }
    }

    pub fn check_support(&self, y: f64) -> Result<()> {
        let ok = y.is_finite()
            && match self.support() {
                Support::Reals => true,
                Support::PositiveReals => y > 0.0,
                Support::UnitInterval => y > 0.0 && y < 1.0,
                Support::Counts => y >= 0.0 && y.fract() == 0.0,
                Support::Fractions(n) => {
                    let k = y * n as f64;
                    (0.0..=1.0).contains(&y) && (k - k.round()).abs() < 1e-9
                }
            };
        if ok {
            Ok(())
        } else {
            Err(GgpmError::Domain { value: y, support: self.support().describe() })
        }
    }

    /// Sufficient statistic T(y).
    pub fn stat(&self, y: f64) -> f64 {
        match self {
            Distribution::GammaScale => y.ln(),
            Distribution::Beta => logit(y),
            _ => y,
        }
    }

    /// c(phi, y) and its phi-derivative.
    pub fn log_c(&self, y: f64, phi: f64) -> (f64, f64) {
        match self {
            Distribution::Gaussian => {
                (-LN_SQRT_2PI - 0.5 * phi.ln() - y * y / (2.0 * phi), -0.5 / phi + y * y / (2.0 * phi * phi))
            }
            Distribution::GammaShape => {
                let k = 1.0 / phi;
                let c = (k - 1.0) * y.ln() - k * phi.ln() - ln_gamma(k);
                let dc = (-y.ln() + phi.ln() - 1.0 + digamma(k)) / (phi * phi);
                (c, dc)
            }
            Distribution::GammaScale => (-y / phi - y.ln(), y / (phi * phi)),
            Distribution::InverseGaussian => {
                let c = -0.5 * (2.0 * std::f64::consts::PI * y * y * y * phi).ln() - 1.0 / (2.0 * y * phi);
                (c, -0.5 / phi + 1.0 / (2.0 * y * phi * phi))
            }
            Distribution::NegativeBinomial => {
                let k = 1.0 / phi;
                let c = ln_gamma(y + k) - ln_factorial(y) - ln_gamma(k);
                (c, (digamma(k) - digamma(y + k)) / (phi * phi))
            }
            Distribution::Poisson => (-ln_factorial(y), 0.0),
            Distribution::ComPoisson => {
                let lf = ln_factorial(y);
                (-phi * lf, -lf)
            }
            Distribution::Binomial { trials } => {
                let n = *trials as f64;
                let k = (y * n).round();
                (ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k), 0.0)
            }
            Distribution::Beta => {
                let k = 1.0 / phi;
                let l1 = (-y).ln_1p();
                let c = ln_gamma(k) + (k - 1.0) * l1 - y.ln();
                (c, -(digamma(k) + l1) / (phi * phi))
            }
        }
    }

    /// a(phi), b(theta) and derivatives. The caller has already checked the
    /// theta range.
    pub fn partition(&self, theta: f64, phi: f64) -> Result<Partition> {
        let p = match self {
            Distribution::Gaussian => {
                Partition { a: phi, a_phi: 1.0, b: 0.5 * theta * theta, b1: theta, b2: 1.0, ..Default::default() }
            }
            Distribution::GammaShape => {
                let inv = 1.0 / theta;
                Partition {
                    a: phi,
                    a_phi: 1.0,
                    b: -(-theta).ln(),
                    b1: -inv,
                    b2: inv * inv,
                    b3: -2.0 * inv * inv * inv,
                    ..Default::default()
                }
            }
            Distribution::GammaScale => {
                let x = theta / phi;
                let (lg, p0, p1, p2) = poly_at(x);
                Partition {
                    a: phi,
                    a_phi: 1.0,
                    b: theta * phi.ln() + phi * lg,
                    b1: phi.ln() + p0,
                    b2: p1 / phi,
                    b3: p2 / (phi * phi),
                    b_phi: x + lg - x * p0,
                    b1_phi: 1.0 / phi - x * p1 / phi,
                    b2_phi: -(x * p2 + p1) / (phi * phi),
                }
            }
            Distribution::InverseGaussian => {
                let r = (-2.0 * theta).sqrt();
                Partition {
                    a: phi,
                    a_phi: 1.0,
                    b: -r,
                    b1: 1.0 / r,
                    b2: 1.0 / (r * r * r),
                    b3: 3.0 / (r * r * r * r * r),
                    ..Default::default()
                }
            }
            Distribution::NegativeBinomial => {
                let x = theta / phi;
                let q = x.exp();
                // 1 - q computed without cancellation
                let omq = -x.exp_m1();
                let h = q / omq;
                Partition {
                    a: phi,
                    a_phi: 1.0,
                    b: -(-x.exp_m1()).ln(),
                    b1: h / phi,
                    b2: h / (omq * phi * phi),
                    b3: h * (1.0 + q) / (omq * omq * phi * phi * phi),
                    b_phi: -x * h / phi,
                    b1_phi: -x * h / (omq * phi * phi) - h / (phi * phi),
                    b2_phi: -x * h * (1.0 + q) / (omq * omq * phi * phi * phi) - 2.0 * h / (omq * phi * phi * phi),
                }
            }
            Distribution::Poisson => {
                let e = theta.exp();
                if !e.is_finite() {
                    return Err(GgpmError::Overflow("Poisson rate".into()));
                }
                Partition { a: 1.0, b: e, b1: e, b2: e, b3: e, ..Default::default() }
            }
            Distribution::ComPoisson => {
                let series = com_series(theta, phi)?;
                let m = series.moments();
                let ls = series.log_partition;
                Partition {
                    a: 1.0 / phi,
                    a_phi: -1.0 / (phi * phi),
                    b: ls / phi,
                    b1: m.mean,
                    b2: phi * m.var,
                    b3: phi * phi * m.third,
                    b_phi: -ls / (phi * phi) + m.mean_s / phi,
                    b1_phi: m.cov_ns,
                    b2_phi: m.var + phi * m.cov_n2s,
                }
            }
            Distribution::Binomial { trials } => {
                let s = sigmoid(theta);
                let v = s * sigmoid(-theta);
                Partition {
                    a: 1.0 / *trials as f64,
                    b: softplus(theta),
                    b1: s,
                    b2: v,
                    b3: v * (1.0 - 2.0 * s),
                    ..Default::default()
                }
            }
            Distribution::Beta => {
                let al = theta / phi;
                let be = (1.0 - theta) / phi;
                let (lga, p0a, p1a, p2a) = poly_at(al);
                let (lgb, p0b, p1b, p2b) = poly_at(be);
                Partition {
                    a: phi,
                    a_phi: 1.0,
                    b: phi * (lga + lgb),
                    b1: p0a - p0b,
                    b2: (p1a + p1b) / phi,
                    b3: (p2a - p2b) / (phi * phi),
                    b_phi: lga + lgb - al * p0a - be * p0b,
                    b1_phi: (-al * p1a + be * p1b) / phi,
                    b2_phi: -(p1a + p1b + al * p2a + be * p2b) / (phi * phi),
                }
            }
        };
        if !(p.b.is_finite() && p.b1.is_finite() && p.b2.is_finite()) {
            return Err(GgpmError::Overflow(format!("{} log-partition", self.name())));
        }
        Ok(p)
    }

    /// Natural parameter whose mean equals `mu`, i.e. the inverse of b',
    /// together with its derivative in phi at fixed mu. For the
    /// COM-Poisson this uses the approximate mean e^theta + 1/(2 phi) - 1/2.
    pub fn mean_to_theta(&self, mu: f64, phi: f64) -> Result<(f64, f64)> {
        let undefined = || GgpmError::Parameter(format!("mean {mu} outside the {} mean range", self.name()));
        match self {
            Distribution::Gaussian => Ok((mu, 0.0)),
            Distribution::GammaShape => {
                if !(mu > 0.0) {
                    return Err(undefined());
                }
                Ok((-1.0 / mu, 0.0))
            }
            Distribution::InverseGaussian => {
                if !(mu > 0.0) {
                    return Err(undefined());
                }
                Ok((-0.5 / (mu * mu), 0.0))
            }
            Distribution::Poisson => {
                if !(mu > 0.0) {
                    return Err(undefined());
                }
                Ok((mu.ln(), 0.0))
            }
            Distribution::NegativeBinomial => {
                if !(mu > 0.0) {
                    return Err(undefined());
                }
                let q = mu * phi / (1.0 + mu * phi);
                Ok((phi * q.ln(), q.ln() + 1.0 - q))
            }
            Distribution::ComPoisson => {
                let z = mu - 0.5 / phi + 0.5;
                if !(z > 0.0) {
                    return Err(undefined());
                }
                Ok((z.ln(), 0.5 / (phi * phi * z)))
            }
            Distribution::Binomial { .. } => {
                if !(mu > 0.0 && mu < 1.0) {
                    return Err(undefined());
                }
                Ok((logit(mu), 0.0))
            }
            Distribution::GammaScale => {
                let theta = phi * inverse_digamma(mu - phi.ln())?;
                let p = self.partition(theta, phi)?;
                Ok((theta, -p.b1_phi / p.b2))
            }
            Distribution::Beta => {
                let theta = self.beta_mean_to_theta(mu, phi)?;
                let p = self.partition(theta, phi)?;
                Ok((theta, -p.b1_phi / p.b2))
            }
        }
    }

    fn beta_mean_to_theta(&self, mu: f64, phi: f64) -> Result<f64> {
        if !mu.is_finite() {
            return Err(GgpmError::Parameter(format!("beta mean statistic {mu}")));
        }
        let f = |t: f64| digamma(t / phi) - digamma((1.0 - t) / phi) - mu;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut x = 0.5;
        for _ in 0..300 {
            let fx = f(x);
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = (trigamma(x / phi) + trigamma((1.0 - x) / phi)) / phi;
            let newton = x - fx / d;
            let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (next - x).abs() <= 1e-16 * x.max(1e-300) || next <= 0.0 || next >= 1.0 {
                x = next;
                break;
            }
            x = next;
        }
        if x > 0.0 && x < 1.0 {
            Ok(x)
        } else {
            Err(GgpmError::Convergence(format!("beta mean inversion for statistic {mu}")))
        }
    }
}
