//! Special functions: log-gamma, polygamma, inverse digamma, normal CDF
//! helpers and the logistic family.

use crate::error::{GgpmError, Result};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

// Bernoulli numbers B_2, B_4, ..., B_14
const BERNOULLI: [f64; 7] = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0];

const ASYMPTOTIC_FROM: f64 = 12.0;

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// ln n! for real n >= 0.
pub fn ln_factorial(n: f64) -> f64 {
    libm::lgamma(n + 1.0)
}

/// Digamma psi_0(x) for x > 0.
pub fn digamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut pow = inv2;
    let mut series = 0.0;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let two_k = 2.0 * (k as f64 + 1.0);
        series += b / two_k * pow;
        pow *= inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma psi_1(x) for x > 0.
pub fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv2 * inv;
    let mut series = 0.0;
    for b in BERNOULLI.iter() {
        series += b * pow;
        pow *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

/// Tetragamma psi_2(x) for x > 0.
pub fn tetragamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv2 * inv2;
    let mut series = 0.0;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let coef = 2.0 * (k as f64 + 1.0) + 1.0;
        series += coef * b * pow;
        pow *= inv2;
    }
    acc - inv2 - inv2 * inv - series
}

/// Polygamma of order 0, 1 or 2.
pub fn polygamma(k: u32, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(GgpmError::Parameter(format!("polygamma argument {x} must be positive")));
    }
    match k {
        0 => Ok(digamma(x)),
        1 => Ok(trigamma(x)),
        2 => Ok(tetragamma(x)),
        _ => Err(GgpmError::Parameter(format!("polygamma order {k} not supported"))),
    }
}

/// Solves psi_0(x) = z for x > 0 by Newton iteration.
pub fn inverse_digamma(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(GgpmError::Parameter(format!("inverse_digamma argument {z}")));
    }
    let mut x = if z >= -2.22 { z.exp() + 0.5 } else { -1.0 / (z + EULER_GAMMA) };
    for _ in 0..100 {
        let step = (digamma(x) - z) / trigamma(x);
        let mut next = x - step;
        if next <= 0.0 {
            next = 0.5 * x;
        }
        let done = (next - x).abs() <= 1e-15 * next.max(1e-300);
        x = next;
        if done {
            return Ok(x);
        }
    }
    if (digamma(x) - z).abs() <= 1e-10 * z.abs().max(1.0) {
        Ok(x)
    } else {
        Err(GgpmError::Convergence(format!("inverse_digamma({z})")))
    }
}

/// Standard normal log-density.
pub fn norm_logpdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// log Phi(z), stable in both tails.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z > 5.0 {
        (-0.5 * libm::erfc(z / std::f64::consts::SQRT_2)).ln_1p()
    } else if z > -20.0 {
        (0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // asymptotic expansion of the Mills ratio
        let z2 = 1.0 / (z * z);
        let series = 1.0 - z2 * (1.0 - 3.0 * z2 * (1.0 - 5.0 * z2 * (1.0 - 7.0 * z2)));
        -0.5 * z * z - (-z).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// Inverse Mills ratio N(z)/Phi(z).
pub fn inv_mills(z: f64) -> f64 {
    (norm_logpdf(z) - log_norm_cdf(z)).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(e^x - 1) for x > 0.
pub fn log_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// log(1 - e^x) for x < 0.
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}
