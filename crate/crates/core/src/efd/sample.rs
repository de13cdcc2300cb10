use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution as _, Gamma, InverseGaussian, Normal, Poisson};

use super::com_poisson::com_series;
use super::distribution::Distribution;
use crate::error::{GgpmError, Result};
use crate::numerics::special::sigmoid;

fn param_err<E: std::fmt::Display>(what: &'static str) -> impl Fn(E) -> GgpmError {
    move |e| GgpmError::Parameter(format!("{what} sampler: {e}"))
}

fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64> {
    if lambda <= 0.0 {
        return Ok(0.0);
    }
    Ok(Poisson::new(lambda).map_err(param_err("poisson"))?.sample(rng))
}

pub(super) fn draw<R: Rng + ?Sized>(dist: Distribution, theta: f64, phi: f64, rng: &mut R) -> Result<f64> {
    let y = match dist {
        Distribution::Gaussian => Normal::new(theta, phi.sqrt()).map_err(param_err("gaussian"))?.sample(rng),
        Distribution::GammaShape => {
            let mean = -1.0 / theta;
            Gamma::new(1.0 / phi, mean * phi).map_err(param_err("gamma"))?.sample(rng)
        }
        Distribution::GammaScale => Gamma::new(theta / phi, phi).map_err(param_err("gamma"))?.sample(rng),
        Distribution::InverseGaussian => {
            let mean = 1.0 / (-2.0 * theta).sqrt();
            InverseGaussian::new(mean, 1.0 / phi).map_err(param_err("inverse gaussian"))?.sample(rng)
        }
        Distribution::NegativeBinomial => {
            // gamma-Poisson mixture with success probability q = e^{theta/phi}
            let x = theta / phi;
            let odds = x.exp() / (-x.exp_m1());
            let lambda = Gamma::new(1.0 / phi, odds).map_err(param_err("gamma"))?.sample(rng);
            poisson_draw(lambda, rng)?
        }
        Distribution::Poisson => poisson_draw(theta.exp(), rng)?,
        Distribution::ComPoisson => {
            let series =
                com_series(theta, phi).map_err(|e| GgpmError::UnsupportedSampler(format!("COM-Poisson: {e}")))?;
            series.quantile(rng.random::<f64>()) as f64
        }
        Distribution::Binomial { trials } => {
            let k = Binomial::new(trials as u64, sigmoid(theta)).map_err(param_err("binomial"))?.sample(rng);
            k as f64 / trials as f64
        }
        Distribution::Beta => {
            let b = Beta::new(theta / phi, (1.0 - theta) / phi).map_err(param_err("beta"))?.sample(rng);
            // keep draws strictly inside the support
            b.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
        }
    };
    Ok(y)
}
