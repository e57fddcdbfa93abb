//! Moments and KL divergences of the exponential-family factors used by the
//! variational posterior (Beta sticks, Gamma precisions, Gaussians).

use statrs::function::gamma::{digamma as statrs_digamma, ln_gamma as statrs_ln_gamma};

/// Arguments to digamma/log are clamped here to keep `-inf` out of the updates.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn digamma(x: f64) -> f64 {
    statrs_digamma(x.max(LOG_FLOOR))
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs_ln_gamma(x.max(LOG_FLOOR))
}

pub fn safe_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Beta(u, v) moments needed by the stick-breaking expectations.
#[derive(Debug, Clone, Copy)]
pub struct BetaMoments {
    pub mean: f64,
    pub second: f64,
    pub one_minus_mean: f64,
    pub one_minus_second: f64,
    pub ln_mean: f64,
    pub ln_one_minus_mean: f64,
}

impl BetaMoments {
    pub fn new(u: f64, v: f64) -> Self {
        let s = u + v;
        let psi_s = digamma(s);
        BetaMoments {
            mean: u / s,
            second: u * (u + 1.0) / (s * (s + 1.0)),
            one_minus_mean: v / s,
            one_minus_second: v * (v + 1.0) / (s * (s + 1.0)),
            ln_mean: digamma(u) - psi_s,
            ln_one_minus_mean: digamma(v) - psi_s,
        }
    }
}

pub fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// KL(Beta(u, v) ‖ Beta(a, b)).
pub fn kl_beta(u: f64, v: f64, a: f64, b: f64) -> f64 {
    let psi_s = digamma(u + v);
    ln_beta_fn(a, b) - ln_beta_fn(u, v)
        + (u - a) * (digamma(u) - psi_s)
        + (v - b) * (digamma(v) - psi_s)
}

/// KL(Ga(a, b) ‖ Ga(a0, b0)) with rate parameterization.
pub fn kl_gamma(a: f64, b: f64, a0: f64, b0: f64) -> f64 {
    (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b.ln() - b0.ln()) + a * (b0 - b) / b
}

/// `E[ln τ]` for τ ~ Ga(a, b).
pub fn gamma_ln_mean(a: f64, b: f64) -> f64 {
    digamma(a) - b.ln()
}
