//! Covariance functions with log-scale hyperparameters.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{GgpmError, Result};

pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    /// s^2 exp(-|x - x'|^2 / (2 l^2))
    Rbf {
        log_scale: f64,
        log_bandwidth: f64,
    },
    /// s^2 x . x'
    Linear {
        log_scale: f64,
    },
    Sum {
        parts: Vec<KernelKind>,
    },
}

impl KernelKind {
    fn n_params(&self) -> usize {
        match self {
            KernelKind::Rbf { .. } => 2,
            KernelKind::Linear { .. } => 1,
            KernelKind::Sum { parts } => parts.iter().map(|p| p.n_params()).sum(),
        }
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        match self {
            KernelKind::Rbf { log_scale, log_bandwidth } => out.extend([*log_scale, *log_bandwidth]),
            KernelKind::Linear { log_scale } => out.push(*log_scale),
            KernelKind::Sum { parts } => parts.iter().for_each(|p| p.push_params(out)),
        }
    }

    fn set_params(&mut self, p: &[f64]) -> usize {
        match self {
            KernelKind::Rbf { log_scale, log_bandwidth } => {
                *log_scale = p[0];
                *log_bandwidth = p[1];
                2
            }
            KernelKind::Linear { log_scale } => {
                *log_scale = p[0];
                1
            }
            KernelKind::Sum { parts } => {
                let mut used = 0;
                for part in parts {
                    used += part.set_params(&p[used..]);
                }
                used
            }
        }
    }

    fn eval(&self, a: &RowDVector<f64>, b: &RowDVector<f64>) -> f64 {
        match self {
            KernelKind::Rbf { log_scale, log_bandwidth } => {
                let r2 = (a - b).norm_squared();
                (2.0 * log_scale - 0.5 * r2 * (-2.0 * log_bandwidth).exp()).exp()
            }
            KernelKind::Linear { log_scale } => (2.0 * log_scale).exp() * a.dot(b),
            KernelKind::Sum { parts } => parts.iter().map(|p| p.eval(a, b)).sum(),
        }
    }

    fn gradients(&self, x: &DMatrix<f64>, out: &mut Vec<DMatrix<f64>>) {
        let n = x.nrows();
        match self {
            KernelKind::Rbf { log_bandwidth, .. } => {
                let k = DMatrix::from_fn(n, n, |i, j| self.eval(&x.row(i).into_owned(), &x.row(j).into_owned()));
                let inv_l2 = (-2.0 * log_bandwidth).exp();
                let dl = DMatrix::from_fn(n, n, |i, j| {
                    let r2 = (x.row(i) - x.row(j)).norm_squared();
                    k[(i, j)] * r2 * inv_l2
                });
                out.push(2.0 * k);
                out.push(dl);
            }
            KernelKind::Linear { .. } => {
                let k = DMatrix::from_fn(n, n, |i, j| self.eval(&x.row(i).into_owned(), &x.row(j).into_owned()));
                out.push(2.0 * k);
            }
            KernelKind::Sum { parts } => parts.iter().for_each(|p| p.gradients(x, out)),
        }
    }
}

/// A kernel plus the relative diagonal jitter applied to training Grams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Jitter added to the diagonal of K(X, X) as a fraction of its mean
    /// diagonal entry.
    pub jitter: f64,
}

impl KernelSpec {
    pub fn rbf(scale: f64, bandwidth: f64) -> Self {
        Self { kind: KernelKind::Rbf { log_scale: scale.ln(), log_bandwidth: bandwidth.ln() }, jitter: DEFAULT_JITTER }
    }

    pub fn linear(scale: f64) -> Self {
        Self { kind: KernelKind::Linear { log_scale: scale.ln() }, jitter: DEFAULT_JITTER }
    }

    pub fn sum(parts: Vec<KernelSpec>) -> Self {
        Self { kind: KernelKind::Sum { parts: parts.into_iter().map(|p| p.kind).collect() }, jitter: DEFAULT_JITTER }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn n_params(&self) -> usize {
        self.kind.n_params()
    }

    /// Log-hyperparameters in a fixed depth-first order.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        self.kind.push_params(&mut v);
        v
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.n_params() {
            return Err(GgpmError::DimensionMismatch { expected: self.n_params(), found: p.len() });
        }
        let mut k = self.clone();
        k.kind.set_params(p);
        Ok(k)
    }

    /// Names of the log-hyperparameters, in `params` order.
    pub fn param_names(&self) -> Vec<String> {
        fn walk(k: &KernelKind, prefix: &str, out: &mut Vec<String>) {
            match k {
                KernelKind::Rbf { .. } => {
                    out.push(format!("{prefix}rbf.log_scale"));
                    out.push(format!("{prefix}rbf.log_bandwidth"));
                }
                KernelKind::Linear { .. } => out.push(format!("{prefix}linear.log_scale")),
                KernelKind::Sum { parts } => {
                    for (i, p) in parts.iter().enumerate() {
                        walk(p, &format!("{prefix}{i}."), out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.kind, "", &mut out);
        out
    }

    pub fn k(&self, a: &RowDVector<f64>, b: &RowDVector<f64>) -> f64 {
        self.kind.eval(a, b)
    }

    /// Cross-covariance K(X, X') without jitter.
    pub fn cross(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != x2.ncols() {
            return Err(GgpmError::DimensionMismatch { expected: x.ncols(), found: x2.ncols() });
        }
        let rows: Vec<RowDVector<f64>> = x.row_iter().map(|r| r.into_owned()).collect();
        let rows2: Vec<RowDVector<f64>> = x2.row_iter().map(|r| r.into_owned()).collect();
        Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| self.kind.eval(&rows[i], &rows2[j])))
    }

    /// Prior variances k(x, x) for each row.
    pub fn diag(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.nrows(),
            x.row_iter().map(|r| {
                let r = r.into_owned();
                self.kind.eval(&r, &r)
            }),
        )
    }

    fn jitter_amount(&self, k: &DMatrix<f64>) -> f64 {
        let n = k.nrows().max(1);
        self.jitter * k.diagonal().sum() / n as f64
    }

    /// Training Gram K(X, X) with jitter on the diagonal.
    pub fn gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<RowDVector<f64>> = x.row_iter().map(|r| r.into_owned()).collect();
        let n = x.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.kind.eval(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let j = self.jitter_amount(&k);
        for i in 0..n {
            k[(i, i)] += j;
        }
        k
    }

    /// dK/d(log hyperparameter) for the training Gram, jitter included.
    pub fn gram_gradients(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.n_params());
        self.kind.gradients(x, &mut out);
        for g in out.iter_mut() {
            let j = self.jitter_amount(g);
            for i in 0..g.nrows() {
                g[(i, i)] += j;
            }
        }
        out
    }
}
