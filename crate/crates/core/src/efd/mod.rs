//! Single-parameter exponential-family likelihoods composed with a map
//! theta(eta) from the latent function.

pub mod com_poisson;
pub mod distribution;
pub mod link;
mod sample;

use serde::{Deserialize, Serialize};

pub use com_poisson::{com_poisson_log_partition, com_series, ComMoments, ComSeries};
pub use distribution::{Distribution, Partition, Support};
pub use link::{Link, ThetaDerivs, ThetaRange};

use crate::error::{GgpmError, Result};

/// Catalog ids accepted by [`LikelihoodFamily::from_id`].
pub const CATALOG: [&str; 13] = [
    "gaussian",
    "gamma_shape",
    "gamma_scale",
    "inv_gaussian",
    "poisson",
    "poisson_linear",
    "com_poisson",
    "com_poisson_linear",
    "neg_binomial",
    "binomial",
    "bernoulli_logit",
    "bernoulli_probit",
    "beta",
];

/// Log-likelihood and its eta-derivatives at one (y, eta), plus the
/// phi-partials of the first three quantities at fixed eta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikTerms {
    pub logp: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub logp_phi: f64,
    pub d1_phi: f64,
    pub d2_phi: f64,
}

impl LikTerms {
    /// u = d/d eta log p.
    pub fn u(&self) -> f64 {
        self.d1
    }

    /// w = -1 / (d^2/d eta^2 log p).
    pub fn w(&self) -> f64 {
        -1.0 / self.d2
    }
}

/// Expansion point for the Taylor approximation at one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionPoint {
    pub eta: f64,
    /// d eta / d phi; nonzero when the point depends on the dispersion.
    pub deta_dphi: f64,
    /// True when the likelihood-agnostic point eta = 0 was used.
    pub agnostic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodFamily {
    pub dist: Distribution,
    pub link: Link,
    phi: f64,
    /// Offset c added to count observations when forming expansion points.
    pub count_offset: f64,
}

fn compatible(dist: Distribution, link: Link) -> bool {
    let d = dist.theta_domain();
    let r = link.range();
    d == r || d == ThetaRange::Reals || (d == ThetaRange::Positive && r == ThetaRange::UnitInterval)
}

impl LikelihoodFamily {
    pub fn new(dist: Distribution, link: Link, phi: f64) -> Result<Self> {
        if !compatible(dist, link) {
            return Err(GgpmError::Parameter(format!(
                "link {} does not map into the {} parameter range",
                link.name(),
                dist.name()
            )));
        }
        if let Distribution::Binomial { trials } = dist {
            if trials == 0 {
                return Err(GgpmError::Parameter("binomial trial count must be positive".into()));
            }
        }
        let mut lik = Self { dist, link, phi: 1.0, count_offset: 0.0 };
        lik.set_dispersion(phi)?;
        Ok(lik)
    }

    /// Builds a catalog member. `trials` is used by `binomial` only.
    pub fn from_id(id: &str, phi: f64, trials: u32) -> Result<Self> {
        let (dist, link) = match id {
            "gaussian" => (Distribution::Gaussian, Link::Canonical),
            "gamma_shape" => (Distribution::GammaShape, Link::NegExp),
            "gamma_scale" => (Distribution::GammaScale, Link::Exp),
            "inv_gaussian" => (Distribution::InverseGaussian, Link::NegExp),
            "poisson" => (Distribution::Poisson, Link::Canonical),
            "poisson_linear" => (Distribution::Poisson, Link::LinearizedLogLoss),
            "com_poisson" => (Distribution::ComPoisson, Link::Canonical),
            "com_poisson_linear" => (Distribution::ComPoisson, Link::LinearizedLogLoss),
            "neg_binomial" => (Distribution::NegativeBinomial, Link::FlippedLogLoss),
            "binomial" => (Distribution::Binomial { trials }, Link::Canonical),
            "bernoulli_logit" => (Distribution::Binomial { trials: 1 }, Link::Canonical),
            "bernoulli_probit" => (Distribution::Binomial { trials: 1 }, Link::Probit),
            "beta" => (Distribution::Beta, Link::Logistic),
            _ => return Err(GgpmError::UnknownId(format!("likelihood '{id}'"))),
        };
        Self::new(dist, link, phi)
    }

    pub fn with_link(&self, link: Link) -> Result<Self> {
        let mut l = Self::new(self.dist, link, self.phi)?;
        l.count_offset = self.count_offset;
        Ok(l)
    }

    pub fn with_count_offset(mut self, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(GgpmError::Parameter(format!("count offset {c} must be non-negative")));
        }
        self.count_offset = c;
        Ok(self)
    }

    pub fn dispersion(&self) -> f64 {
        self.phi
    }

    pub fn has_free_dispersion(&self) -> bool {
        self.dist.has_free_dispersion()
    }

    /// Sets phi; ignored for likelihoods whose dispersion is fixed.
    pub fn set_dispersion(&mut self, phi: f64) -> Result<()> {
        if let Some(fixed) = self.dist.fixed_dispersion() {
            self.phi = fixed;
            return Ok(());
        }
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(GgpmError::Parameter(format!("dispersion {phi} must be positive")));
        }
        self.phi = phi;
        Ok(())
    }

    pub fn with_log_dispersion(&self, log_phi: f64) -> Result<Self> {
        let mut l = self.clone();
        l.set_dispersion(log_phi.exp())?;
        Ok(l)
    }

    pub fn support(&self) -> Support {
        self.dist.support()
    }

    pub fn check_support(&self, y: f64) -> Result<()> {
        self.dist.check_support(y)
    }

    fn theta_checked(&self, eta: f64) -> Result<ThetaDerivs> {
        if !eta.is_finite() {
            return Err(GgpmError::Parameter(format!("latent value {eta} is not finite")));
        }
        let t = self.link.theta(eta);
        self.dist.check_theta(t.theta)?;
        Ok(t)
    }

    /// Log-likelihood, eta-derivatives and phi-partials.
    pub fn terms(&self, y: f64, eta: f64) -> Result<LikTerms> {
        self.check_support(y)?;
        self.terms_unchecked(y, eta)
    }

    /// As [`terms`](Self::terms) without the support check.
    pub fn terms_unchecked(&self, y: f64, eta: f64) -> Result<LikTerms> {
        let th = self.theta_checked(eta)?;
        let phi = self.phi;
        let p = self.dist.partition(th.theta, phi)?;
        let t = self.dist.stat(y);
        let (c, c_phi) = self.dist.log_c(y, phi);
        let r = t - p.b1;
        let core = t * th.theta - p.b;
        let logp = core / p.a + c;
        let d1 = r * th.d1 / p.a;
        let d2 = (r * th.d2 - p.b2 * th.d1 * th.d1) / p.a;
        let d3 = (r * th.d3 - 3.0 * p.b2 * th.d1 * th.d2 - p.b3 * th.d1 * th.d1 * th.d1) / p.a;
        let (logp_phi, d1_phi, d2_phi) = if self.has_free_dispersion() {
            let ra = p.a_phi / p.a;
            (
                -ra * core / p.a - p.b_phi / p.a + c_phi,
                -ra * d1 - p.b1_phi * th.d1 / p.a,
                -ra * d2 - (p.b1_phi * th.d2 + p.b2_phi * th.d1 * th.d1) / p.a,
            )
        } else {
            (0.0, 0.0, 0.0)
        };
        let out = LikTerms { logp, d1, d2, d3, logp_phi, d1_phi, d2_phi };
        if !(logp.is_finite() && d1.is_finite() && d2.is_finite()) {
            return Err(GgpmError::Overflow(format!("{} log-likelihood at eta={eta}", self.dist.name())));
        }
        Ok(out)
    }

    /// log p(y | theta(eta), phi).
    pub fn log_likelihood(&self, y: f64, eta: f64) -> Result<f64> {
        Ok(self.terms(y, eta)?.logp)
    }

    /// Log-likelihood that maps every failure to -infinity; used inside
    /// integrands where the tails may leave the representable range.
    pub fn log_likelihood_or_neg_inf(&self, y: f64, eta: f64) -> f64 {
        match self.terms_unchecked(y, eta) {
            Ok(t) => t.logp,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// (u, w) at (y, eta).
    pub fn derivative_functions(&self, y: f64, eta: f64) -> Result<(f64, f64)> {
        let t = self.terms(y, eta)?;
        if t.d2 == 0.0 {
            return Err(GgpmError::SingularCurvature { eta, y });
        }
        Ok((t.u(), t.w()))
    }

    /// Expansion point g(T(y)) (with the count offset for count supports);
    /// binomial likelihoods use the agnostic point 0.
    pub fn canonical_expansion_point(&self, y: f64) -> Result<ExpansionPoint> {
        self.check_support(y)?;
        if let Distribution::Binomial { .. } = self.dist {
            return Ok(ExpansionPoint { eta: 0.0, deta_dphi: 0.0, agnostic: true });
        }
        let mut stat = self.dist.stat(y);
        if self.support() == Support::Counts {
            stat += self.count_offset;
            if stat <= 0.0 {
                return Err(GgpmError::UndefinedPoint { y, reason: "zero count needs a positive count offset".into() });
            }
        }
        let (theta, dtheta) = self
            .dist
            .mean_to_theta(stat, self.phi)
            .map_err(|e| GgpmError::UndefinedPoint { y, reason: e.to_string() })?;
        let (eta, deta) =
            self.link.inverse(theta).map_err(|e| GgpmError::UndefinedPoint { y, reason: e.to_string() })?;
        let deta_dphi = if self.has_free_dispersion() { deta * dtheta } else { 0.0 };
        Ok(ExpansionPoint { eta, deta_dphi, agnostic: false })
    }

    /// Mean and variance of T(y) at latent value eta. The COM-Poisson mean
    /// uses the closed-form approximation; its variance comes from the series.
    pub fn mean_and_variance(&self, eta: f64) -> Result<(f64, f64)> {
        let th = self.theta_checked(eta)?;
        let p = self.dist.partition(th.theta, self.phi)?;
        let mean = match self.dist {
            Distribution::ComPoisson => th.theta.exp() + 0.5 / self.phi - 0.5,
            _ => p.b1,
        };
        Ok((mean, p.b2 * p.a))
    }

    /// Exact mean of T(y), b'(theta(eta)).
    pub fn exact_mean(&self, eta: f64) -> Result<f64> {
        let th = self.theta_checked(eta)?;
        Ok(self.dist.partition(th.theta, self.phi)?.b1)
    }

    /// Link function g: maps a mean of T(y) to eta.
    pub fn link_fn(&self, mu: f64) -> Result<f64> {
        let (theta, _) = self.dist.mean_to_theta(mu, self.phi)?;
        Ok(self.link.inverse(theta)?.0)
    }

    /// Inverse link: eta to the mean of T(y).
    pub fn inverse_link(&self, eta: f64) -> Result<f64> {
        Ok(self.mean_and_variance(eta)?.0)
    }

    /// Draws y ~ p(y | theta(eta), phi).
    pub fn sample_output<R: rand::Rng + ?Sized>(&self, eta: f64, rng: &mut R) -> Result<f64> {
        let th = self.theta_checked(eta)?;
        sample::draw(self.dist, th.theta, self.phi, rng)
    }
}
