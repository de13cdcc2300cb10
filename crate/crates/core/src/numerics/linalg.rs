//! Cholesky-based solves for symmetric positive definite matrices with a
//! relative jitter escalation policy.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GgpmError, Result};

/// Largest jitter tried, relative to the mean diagonal magnitude.
pub const MAX_RELATIVE_JITTER: f64 = 1e-2;

/// Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Diagonal jitter that had to be added (0 when none).
    pub jitter: f64,
}

impl PsdFactor {
    /// Factors `a`, adding diagonal jitter starting at `base_jitter` times
    /// the mean diagonal if the plain factorization fails.
    pub fn new(a: &DMatrix<f64>, base_jitter: f64) -> Result<Self> {
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let n = a.nrows().max(1);
        let scale = (a.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n as f64).max(1e-300);
        let mut rel = base_jitter.max(1e-12);
        loop {
            let j = rel * scale;
            let mut shifted = a.clone();
            for i in 0..a.nrows() {
                shifted[(i, i)] += j;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, jitter: j });
            }
            if rel >= MAX_RELATIVE_JITTER {
                return Err(GgpmError::NotPsd { jitter: j });
            }
            rel = (rel * 10.0).min(MAX_RELATIVE_JITTER);
        }
    }

    /// Factors without any jitter; fails if not positive definite.
    pub fn exact(a: &DMatrix<f64>) -> Result<Self> {
        Cholesky::new(a.clone()).map(|chol| Self { chol, jitter: 0.0 }).ok_or(GgpmError::NotPsd { jitter: 0.0 })
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solves L x = b.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.l_dirty().solve_lower_triangular(b).expect("triangular factor is nonsingular")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Solves A X = B for symmetric positive definite A.
pub fn psd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(PsdFactor::new(a, 1e-8)?.solve(b))
}

/// log |A| for symmetric positive definite A.
pub fn psd_logdet(a: &DMatrix<f64>) -> Result<f64> {
    Ok(PsdFactor::new(a, 1e-8)?.logdet())
}
