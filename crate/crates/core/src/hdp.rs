//! Stick-breaking expectations and the sticky HDP updates: indicator (`φ`)
//! posteriors, stick posteriors, transition posteriors and concentration
//! point estimates.

use crate::dist::{safe_ln, BetaMoments};
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

/// Moments of the truncated stick-breaking weights `β_k = β̄_k ∏_{i<k} (1 - β̄_i)`
/// with `β̄_K = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StickExpectations {
    pub e_beta: Vec<f64>,
    pub e_beta_sq: Vec<f64>,
    pub e_log_beta: Vec<f64>,
    pub e_log_bar: Vec<f64>,
    pub e_log_one_minus_bar: Vec<f64>,
}

impl StickExpectations {
    pub(crate) fn compute(u: &[f64], v: &[f64]) -> Self {
        let m = u.len();
        let k = m + 1;
        let mut e_beta = Vec::with_capacity(k);
        let mut e_beta_sq = Vec::with_capacity(k);
        let mut e_log_beta = Vec::with_capacity(k);
        let mut e_log_bar = Vec::with_capacity(m);
        let mut e_log_one_minus_bar = Vec::with_capacity(m);
        let (mut rem, mut rem_sq, mut rem_log) = (1.0, 1.0, 0.0);
        for (&ui, &vi) in u.iter().zip(v) {
            let b = BetaMoments::new(ui, vi);
            e_beta.push(b.mean * rem);
            e_beta_sq.push(b.second * rem_sq);
            e_log_beta.push(b.ln_mean + rem_log);
            e_log_bar.push(b.ln_mean);
            e_log_one_minus_bar.push(b.ln_one_minus_mean);
            rem *= b.one_minus_mean;
            rem_sq *= b.one_minus_second;
            rem_log += b.ln_one_minus_mean;
        }
        e_beta.push(rem);
        e_beta_sq.push(rem_sq);
        e_log_beta.push(rem_log);
        // truncation leaves the whole remainder on the last stick, so this only
        // removes rounding drift
        let total: f64 = e_beta.iter().sum();
        e_beta.iter_mut().for_each(|b| *b /= total);
        StickExpectations {
            e_beta,
            e_beta_sq,
            e_log_beta,
            e_log_bar,
            e_log_one_minus_bar,
        }
    }

    pub fn k(&self) -> usize {
        self.e_beta.len()
    }
}

/// Moments of truncated stick-breaking weights from `K-1` Beta posteriors.
pub fn stick_expectations(u: &[f64], v: &[f64]) -> Result<StickExpectations> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} stick shapes vs {} stick rates",
            u.len(),
            v.len()
        )));
    }
    for (name, xs) in [("stick_u", u), ("stick_v", v)] {
        if let Some(&bad) = xs.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::positive(name, bad));
        }
    }
    Ok(StickExpectations::compute(u, v))
}

/// `φ` at its prior: `(α E[β_k] + κ 1{i=k}) / (α + κ)` for every `(i, i')`.
pub fn prior_phi(alpha: f64, kappa: f64, e_beta: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let k = e_beta.len();
    (0..k)
        .map(|i| {
            let row: Vec<f64> = (0..k)
                .map(|j| (alpha * e_beta[j] + if i == j { kappa } else { 0.0 }) / (alpha + kappa))
                .collect();
            vec![row; k]
        })
        .collect()
}

/// Approximation of `E[ln(1 + α β / κ)]` from the first two moments of `β`.
///
/// The Taylor branch is used when `κ ≥ α E[β]`, otherwise the large-argument
/// branch with `E[1/β] ≈ E[β²] / E[β]³`.
pub fn sticky_log_term(
    alpha: f64,
    kappa: f64,
    e_beta: f64,
    e_beta_sq: f64,
    e_log_beta: f64,
) -> f64 {
    if kappa >= alpha * e_beta {
        alpha / kappa * e_beta - alpha * alpha / (2.0 * kappa * kappa) * e_beta_sq
    } else {
        let eb = e_beta.max(crate::dist::LOG_FLOOR);
        alpha.ln() - kappa.ln() + e_log_beta + kappa / alpha * (e_beta_sq / (eb * eb * eb))
    }
}

/// `E[ln P(c_{ii'} = k | β)] + ln(α + κ)` for every `k`, under the same
/// approximation the indicator update uses. With `κ = 0` the self entry is
/// the ordinary `ln α + E[ln β_i]`.
pub fn prior_log_weights(i: usize, alpha: f64, kappa: f64, sticks: &StickExpectations) -> Vec<f64> {
    (0..sticks.k())
        .map(|k| {
            if k == i && kappa > 0.0 {
                kappa.ln()
                    + sticky_log_term(
                        alpha,
                        kappa,
                        sticks.e_beta[k],
                        sticks.e_beta_sq[k],
                        sticks.e_log_beta[k],
                    )
            } else {
                alpha.ln() + sticks.e_log_beta[k]
            }
        })
        .collect()
}

/// Sums pairwise mode marginals over time into `counts[i][k] = Σ_t E[s_{t-1}=i, s_t=k]`.
pub fn transition_counts(pairwise: &[Vec<Vec<f64>>], k: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; k]; k];
    for slice in pairwise {
        for (c_row, p_row) in counts.iter_mut().zip(slice) {
            for (c, p) in c_row.iter_mut().zip(p_row) {
                *c += p;
            }
        }
    }
    counts
}

/// Expected log stick weights `E[ln π'_{ii'}]` for every transition row.
pub fn transition_log_weights(trans_u: &[Vec<f64>], trans_v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    trans_u
        .iter()
        .zip(trans_v)
        .map(|(u, v)| StickExpectations::compute(u, v).e_log_beta)
        .collect()
}

/// Indicator update. For each `(i, i')` the log weight of `k` is
/// `ln α + E[ln β_k] + U` (`k ≠ i`) or `ln κ + E[ln(1 + α β_k / κ)] + U` (`k = i`)
/// with `U = E[ln π'_{ii'}] Σ_t E[s_{t-1}=i, s_t=k]`, normalized over `k`.
pub fn update_phi(
    alpha: f64,
    kappa: f64,
    sticks: &StickExpectations,
    counts: &[Vec<f64>],
    trans_log: &[Vec<f64>],
) -> Vec<Vec<Vec<f64>>> {
    let k = sticks.k();
    (0..k)
        .map(|i| {
            let prior = prior_log_weights(i, alpha, kappa, sticks);
            (0..k)
                .map(|ip| {
                    let w: Vec<f64> = (0..k)
                        .map(|kk| prior[kk] + trans_log[i][ip] * counts[i][kk])
                        .collect();
                    softmax(&w)
                })
                .collect()
        })
        .collect()
}

pub(crate) fn softmax(w: &[f64]) -> Vec<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = w.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

/// Top-level stick posteriors from the indicators. Self-indicator mass
/// (`j = i`) is excluded from the counts.
pub fn update_sticks(phi: &[Vec<Vec<f64>>], gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let k = phi.len();
    // mass[k] = Σ_{j≠k} Σ_{j'} φ_{jj'}(k)
    let mut mass = vec![0.0; k];
    for (j, rows) in phi.iter().enumerate() {
        for row in rows {
            for (kk, &p) in row.iter().enumerate() {
                if kk != j {
                    mass[kk] += p;
                }
            }
        }
    }
    let mut u = Vec::with_capacity(k - 1);
    let mut v = Vec::with_capacity(k - 1);
    let mut tail: f64 = mass.iter().sum();
    for m in mass.iter().take(k - 1) {
        tail -= m;
        u.push(1.0 + m);
        v.push(gamma + tail.max(0.0));
    }
    (u, v)
}

/// Posterior parameters of the initial-state and transition sticks.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPosterior {
    pub init_u: Vec<f64>,
    pub init_v: Vec<f64>,
    pub trans_u: Vec<Vec<f64>>,
    pub trans_v: Vec<Vec<f64>>,
}

/// Initial-state and transition stick updates. `trans_prior` is `α + κ`.
pub fn update_transitions(
    phi: &[Vec<Vec<f64>>],
    counts: &[Vec<f64>],
    init_marginal: &[f64],
    alpha0: f64,
    trans_prior: f64,
) -> TransitionPosterior {
    let k = phi.len();
    let mut init_u = Vec::with_capacity(k - 1);
    let mut init_v = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        init_u.push(1.0 + init_marginal[i]);
        init_v.push(alpha0 + init_marginal[i + 1..].iter().sum::<f64>());
    }
    let mut trans_u = Vec::with_capacity(k);
    let mut trans_v = Vec::with_capacity(k);
    for i in 0..k {
        // n[i'] = Σ_k counts[i][k] φ_{ii'}(k)
        let n: Vec<f64> = (0..k)
            .map(|ip| phi[i][ip].iter().zip(&counts[i]).map(|(p, c)| p * c).sum())
            .collect();
        let mut u = Vec::with_capacity(k - 1);
        let mut v = Vec::with_capacity(k - 1);
        for ip in 0..k - 1 {
            u.push(1.0 + n[ip]);
            v.push(trans_prior + n[ip + 1..].iter().sum::<f64>());
        }
        trans_u.push(u);
        trans_v.push(v);
    }
    TransitionPosterior {
        init_u,
        init_v,
        trans_u,
        trans_v,
    }
}

/// Expected transition matrix `π̂_{ij} = Σ_k E[π'_{ik}] φ_{ik}(j)`, rows
/// renormalized, together with its elementwise logs.
pub fn expected_transition_matrix(
    trans_u: &[Vec<f64>],
    trans_v: &[Vec<f64>],
    phi: &[Vec<Vec<f64>>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k = phi.len();
    let mut pi = vec![vec![0.0; k]; k];
    for i in 0..k {
        let weights = StickExpectations::compute(&trans_u[i], &trans_v[i]).e_beta;
        for (kk, w) in weights.iter().enumerate() {
            for j in 0..k {
                pi[i][j] += w * phi[i][kk][j];
            }
        }
        let s: f64 = pi[i].iter().sum();
        pi[i].iter_mut().for_each(|p| *p /= s);
    }
    let log = pi
        .iter()
        .map(|row| row.iter().map(|&p| safe_ln(p)).collect())
        .collect();
    (pi, log)
}

/// Transition weights `ln Σ_{i'} exp(E[ln π'_{ii'}]) φ_{ii'}(k)` and the
/// share of each stick in them.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRouting {
    /// `K × K`, rows sum to at most 1 in the exponential domain.
    pub log_weight: Vec<Vec<f64>>,
    /// `resp[i][i'][k]`: fraction of the `i → k` weight carried by stick `i'`;
    /// sums to 1 over `i'`.
    pub resp: Vec<Vec<Vec<f64>>>,
}

pub fn transition_routing(
    trans_u: &[Vec<f64>],
    trans_v: &[Vec<f64>],
    phi: &[Vec<Vec<f64>>],
) -> TransitionRouting {
    let k = phi.len();
    let trans_log = transition_log_weights(trans_u, trans_v);
    let mut log_weight = vec![vec![0.0; k]; k];
    let mut resp = vec![vec![vec![0.0; k]; k]; k];
    let mut terms = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            for ip in 0..k {
                terms[ip] = trans_log[i][ip] + safe_ln(phi[i][ip][j]);
            }
            let lw = log_sum_exp(&terms);
            log_weight[i][j] = lw;
            for ip in 0..k {
                resp[i][ip][j] = (terms[ip] - lw).exp();
            }
        }
    }
    TransitionRouting { log_weight, resp }
}

/// Solves `max Σ_k c_k ln φ_k + φ_k w_k - φ_k ln φ_k` over the simplex.
///
/// Stationarity gives `c_k/φ_k - ln φ_k + w_k - μ = 0` for a shared
/// multiplier `μ`; each `φ_k(μ)` is decreasing in `μ`, so `μ` is found by
/// safeguarded Newton on `Σ φ_k(μ) = 1`.
pub fn solve_indicator(w: &[f64], c: &[f64]) -> Vec<f64> {
    let k = w.len();
    if c.iter().all(|&x| x <= 0.0) {
        return softmax(w);
    }
    let phi_at = |mu: f64, out: &mut [f64]| {
        for kk in 0..k {
            out[kk] = if c[kk] > 0.0 {
                // φ = c / y with y + ln y = ln c - (w - μ)
                let ln_c = c[kk].ln();
                let s = solve_exp_plus_id(ln_c - (w[kk] - mu));
                (ln_c - s).exp()
            } else {
                (w[kk] - mu).exp()
            };
        }
    };
    let mut lo = (0..k)
        .map(|kk| c[kk] + w[kk])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut hi = (0..k)
        .map(|kk| c[kk] * k as f64 + w[kk] + (k as f64).ln())
        .fold(f64::NEG_INFINITY, f64::max);
    // without counts the solution is the softmax of w, and counts only raise
    // every φ_k, so its normalizer bounds μ from below
    lo = lo.max(log_sum_exp(w));
    let mut phi = vec![0.0; k];
    let mut mu = lo;
    for _ in 0..200 {
        phi_at(mu, &mut phi);
        let g: f64 = phi.iter().sum::<f64>() - 1.0;
        if g > 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        if g.abs() < 1e-15 || hi - lo < 1e-15 * (1.0 + mu.abs()) {
            break;
        }
        let slope: f64 = phi.iter().zip(c).map(|(&p, &ck)| p * p / (ck + p)).sum();
        let step = mu + g / slope;
        mu = if slope > 0.0 && step > lo && step < hi {
            step
        } else {
            0.5 * (lo + hi)
        };
    }
    let total: f64 = phi.iter().sum();
    phi.iter_mut().for_each(|p| *p /= total);
    phi
}

/// Root of `e^s + s = l`.
fn solve_exp_plus_id(l: f64) -> f64 {
    let mut s = if l > 1.0 {
        (l - l.ln()).ln()
    } else {
        l.min(0.0)
    };
    for _ in 0..100 {
        let e = s.exp();
        let step = (e + s - l) / (e + 1.0);
        s -= step;
        if step.abs() <= 1e-15 * (1.0 + s.abs()) {
            break;
        }
    }
    s
}

/// Indicator update that maximizes a lower bound on the transition term,
/// tight at the current `φ`: for every `(i, i')` the counts `N_ik` are routed
/// to stick `i'` in proportion to `resp[i][i'][k]`, and the resulting
/// objective is maximized exactly.
pub fn update_phi_routed(
    alpha: f64,
    kappa: f64,
    sticks: &StickExpectations,
    counts: &[Vec<f64>],
    routing: &TransitionRouting,
) -> Vec<Vec<Vec<f64>>> {
    let k = sticks.k();
    (0..k)
        .map(|i| {
            let prior = prior_log_weights(i, alpha, kappa, sticks);
            (0..k)
                .map(|ip| {
                    let c: Vec<f64> = (0..k)
                        .map(|kk| counts[i][kk] * routing.resp[i][ip][kk])
                        .collect();
                    solve_indicator(&prior, &c)
                })
                .collect()
        })
        .collect()
}

/// Result of the optional concentration update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationUpdate {
    pub a: f64,
    pub b: f64,
    pub u: f64,
    pub v: f64,
    pub alpha: f64,
    pub kappa: f64,
}

/// Gamma posterior on `α' = α + κ`, Beta posterior on `κ' = κ / (α + κ)`, and
/// the point estimates `α = α'(1 - κ')`, `κ = α' κ'`.
pub fn update_concentrations(
    prior: (f64, f64, f64, f64),
    phi: &[Vec<Vec<f64>>],
    trans_u: &[Vec<f64>],
    trans_v: &[Vec<f64>],
) -> Result<ConcentrationUpdate> {
    let (a0, b0, u0, v0) = prior;
    let k = phi.len();
    let mut log_one_minus = 0.0;
    for (u_row, v_row) in trans_u.iter().zip(trans_v) {
        for (&u, &v) in u_row.iter().zip(v_row) {
            log_one_minus += BetaMoments::new(u, v).ln_one_minus_mean;
        }
    }
    let a = a0 + (k * k) as f64;
    let b = b0 - log_one_minus;
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::numerical(format!(
            "concentration rate b_alpha = {b} is not positive"
        )));
    }
    let mut self_mass = 0.0;
    let mut other_mass = 0.0;
    for (i, rows) in phi.iter().enumerate() {
        for row in rows {
            for (kk, &p) in row.iter().enumerate() {
                if kk == i {
                    self_mass += p;
                } else {
                    other_mass += p;
                }
            }
        }
    }
    let u = u0 + self_mass;
    let v = v0 + other_mass;
    let alpha_prime = a / b;
    let kappa_prime = u / (u + v);
    Ok(ConcentrationUpdate {
        a,
        b,
        u,
        v,
        alpha: alpha_prime * (1.0 - kappa_prime),
        kappa: alpha_prime * kappa_prime,
    })
}
