//! Conway-Maxwell-Poisson partition function S(mu, nu) = sum_n (mu^n / n!)^nu
//! and the moments of n and s_n = n log mu - log n! under the weights
//! proportional to (mu^n / n!)^nu.

use crate::error::{GgpmError, Result};
use crate::numerics::special::ln_factorial;

const REL_TAIL: f64 = 1e-16;

/// Truncated series with weights normalized to sum to one.
#[derive(Debug, Clone)]
pub struct ComSeries {
    pub log_partition: f64,
    /// (n, normalized weight) in increasing n
    pub terms: Vec<(u64, f64)>,
    pub log_mu: f64,
}

/// Moments used by the dispersion-dependent partition derivatives.
#[derive(Debug, Clone, Copy)]
pub struct ComMoments {
    pub mean: f64,
    pub var: f64,
    pub third: f64,
    /// E[s]
    pub mean_s: f64,
    /// Cov(n, s)
    pub cov_ns: f64,
    /// E[(n - mean)^2 (s - E[s])]
    pub cov_n2s: f64,
}

fn cap_for(mode: f64, nu: f64) -> u64 {
    let var = (mode + 1.0) / nu.max(1e-3);
    (mode + 40.0 * var.sqrt()).max(1000.0).ceil() as u64
}

/// Evaluates the series for log mu = `log_mu` and exponent `nu`.
pub fn com_series(log_mu: f64, nu: f64) -> Result<ComSeries> {
    if !(nu > 0.0) || !log_mu.is_finite() {
        return Err(GgpmError::Parameter(format!("COM-Poisson series with log mu={log_mu}, nu={nu}")));
    }
    if log_mu > 16.0 {
        return Err(GgpmError::Overflow(format!("COM-Poisson series with mu=e^{log_mu}")));
    }
    let log_term = |n: u64| nu * (n as f64 * log_mu - ln_factorial(n as f64));
    let mode = log_mu.exp().floor();
    let cap = cap_for(mode, nu);
    let start = mode as u64;
    let ref_l = log_term(start);
    // upward from the mode
    let mut up = Vec::new();
    let mut sum = 0.0;
    let mut n = start;
    loop {
        let w = (log_term(n) - ref_l).exp();
        up.push(w);
        sum += w;
        // ratio of the next term to this one, decreasing in n
        let ratio = (nu * (log_mu - ((n + 1) as f64).ln())).exp();
        if ratio < 1.0 && w * ratio / (1.0 - ratio) <= REL_TAIL * sum {
            break;
        }
        n += 1;
        if n > cap {
            return Err(GgpmError::Convergence(format!("COM-Poisson series exceeded {cap} terms")));
        }
    }
    let mut down = Vec::new();
    let mut m = start;
    while m > 0 {
        m -= 1;
        let w = (log_term(m) - ref_l).exp();
        down.push(w);
        sum += w;
        // ratio of term m-1 to term m is (m / mu)^nu, decreasing as m falls
        let ratio = ((m as f64).ln() - log_mu).exp().powf(nu);
        if ratio < 1.0 && w * ratio / (1.0 - ratio) <= REL_TAIL * sum {
            break;
        }
    }
    let first = start - down.len() as u64;
    let mut terms = Vec::with_capacity(up.len() + down.len());
    for (i, w) in down.iter().rev().enumerate() {
        terms.push((first + i as u64, w / sum));
    }
    for (i, w) in up.iter().enumerate() {
        terms.push((start + i as u64, w / sum));
    }
    Ok(ComSeries { log_partition: ref_l + sum.ln(), terms, log_mu })
}

/// log S(mu, nu).
pub fn com_poisson_log_partition(mu: f64, nu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(GgpmError::Parameter(format!("COM-Poisson mu={mu} must be positive")));
    }
    Ok(com_series(mu.ln(), nu)?.log_partition)
}

impl ComSeries {
    pub fn moments(&self) -> ComMoments {
        let s = |n: u64| n as f64 * self.log_mu - ln_factorial(n as f64);
        let mut mean = 0.0;
        let mut mean_s = 0.0;
        for &(n, w) in &self.terms {
            mean += w * n as f64;
            mean_s += w * s(n);
        }
        let (mut var, mut third, mut cov_ns, mut cov_n2s) = (0.0, 0.0, 0.0, 0.0);
        for &(n, w) in &self.terms {
            let dn = n as f64 - mean;
            let ds = s(n) - mean_s;
            var += w * dn * dn;
            third += w * dn * dn * dn;
            cov_ns += w * dn * ds;
            cov_n2s += w * dn * dn * ds;
        }
        ComMoments { mean, var, third, mean_s, cov_ns, cov_n2s }
    }

    /// Inverse-CDF draw given a uniform variate in [0, 1).
    pub fn quantile(&self, u: f64) -> u64 {
        let mut acc = 0.0;
        for &(n, w) in &self.terms {
            acc += w;
            if u < acc {
                return n;
            }
        }
        self.terms.last().map(|t| t.0).unwrap_or(0)
    }
}
