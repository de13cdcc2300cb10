use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::efd::LikelihoodFamily;
use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::numerics::PsdFactor;

#[derive(Debug, Clone, PartialEq)]
pub struct SampledData {
    /// Latent draw eta ~ N(0, K).
    pub eta: Vec<f64>,
    pub y: Vec<f64>,
}

/// Draws a latent function at the rows of `x` and outputs from the
/// likelihood. Reproducible for a fixed seed.
pub fn sample_dataset(lik: &LikelihoodFamily, kernel: &KernelSpec, x: &DMatrix<f64>, seed: u64) -> Result<SampledData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    let l = PsdFactor::new(&kernel.gram(x), 1e-10)?.l();
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
    let eta = l * z;
    let y = eta.iter().map(|&e| lik.sample_output(e, &mut rng)).collect::<Result<Vec<f64>>>()?;
    Ok(SampledData { eta: eta.iter().copied().collect(), y })
}
