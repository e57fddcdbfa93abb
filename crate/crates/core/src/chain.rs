//! Auxiliary HMM over the mode chain, log-domain forward-backward, and Viterbi.

use crate::error::{Error, Result};
use crate::hdp::{transition_routing, StickExpectations};
use crate::lds::SuffStats;
use crate::linalg::log_sum_exp;
use crate::model::VariationalPosterior;
use crate::moments::ModeExpectations;

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryHMM {
    pub log_pi0: Vec<f64>,
    pub log_trans: Vec<Vec<f64>>,
    /// `T × K` expected log-likelihood terms, unnormalized.
    pub log_emit: Vec<Vec<f64>>,
}

impl AuxiliaryHMM {
    pub fn k(&self) -> usize {
        self.log_pi0.len()
    }

    pub fn len(&self) -> usize {
        self.log_emit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_emit.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeMarginals {
    pub unary: Vec<Vec<f64>>,
    /// `pairwise[t - 1][i][j] = q(s_{t-1}=i, s_t=j)`.
    pub pairwise: Vec<Vec<Vec<f64>>>,
    pub log_z: f64,
    pub entropy: f64,
}

/// Per-mode `ln ê_t(i)` from the aggregated smoothed moments.
pub fn emission_log_terms(exps: &[ModeExpectations], stats: &SuffStats) -> Vec<Vec<f64>> {
    let n = stats.n_seq as f64;
    (0..stats.len())
        .map(|t| {
            exps.iter()
                .map(|e| {
                    let obs = e.obs_quad(&stats.sum_zz[t], &stats.sum_zx[t], &stats.sum_xx[t])
                        - n * e.ln_det_rinv;
                    let state = if t == 0 {
                        e.init_quad(&stats.sum_x[0], &stats.sum_xx[0], n) - n * e.ln_det_sigma_inv
                    } else {
                        e.trans_quad(
                            &stats.sum_xx[t],
                            &stats.sum_cross[t - 1],
                            &stats.sum_xx[t - 1],
                        )
                    };
                    -0.5 * (state + obs)
                })
                .collect()
        })
        .collect()
}

fn log_normalize(xs: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(xs);
    xs.iter().map(|x| x - z).collect()
}

/// Builds the auxiliary HMM: initial and transition log weights from the
/// stick posteriors, emissions from the smoothed moments.
pub fn compute_lambda_s(post: &VariationalPosterior, stats: &SuffStats) -> Result<AuxiliaryHMM> {
    let exps = ModeExpectations::from_posterior(post);
    compute_lambda_s_with(post, &exps, stats)
}

pub fn compute_lambda_s_with(
    post: &VariationalPosterior,
    exps: &[ModeExpectations],
    stats: &SuffStats,
) -> Result<AuxiliaryHMM> {
    let e_ln_pi0 = StickExpectations::compute(&post.init_u, &post.init_v).e_log_beta;
    let log_pi0 = log_normalize(&e_ln_pi0);
    let log_trans = transition_routing(&post.trans_u, &post.trans_v, &post.phi).log_weight;
    let log_emit = emission_log_terms(exps, stats);
    if let Some(t) = log_emit
        .iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::numerical(format!(
            "non-finite emission term at t={}",
            t + 1
        )));
    }
    Ok(AuxiliaryHMM {
        log_pi0,
        log_trans,
        log_emit,
    })
}

/// Log-domain forward-backward.
///
/// Messages stay in the log domain; each step subtracts the running maximum
/// before exponentiating, so the sums over the previous mode reduce to a
/// product with the exponentiated transition weights.
pub fn forward_backward(aux: &AuxiliaryHMM) -> ModeMarginals {
    let t_len = aux.len();
    let k = aux.k();
    let trans: Vec<Vec<f64>> = aux
        .log_trans
        .iter()
        .map(|r| r.iter().map(|l| l.exp()).collect())
        .collect();
    let shifted = |v: &[f64], out: &mut Vec<f64>| -> f64 {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.clear();
        out.extend(v.iter().map(|x| (x - m).exp()));
        m
    };
    let mut la = vec![vec![0.0; k]; t_len];
    let mut lb = vec![vec![0.0; k]; t_len];
    let mut e = Vec::with_capacity(k);
    for i in 0..k {
        la[0][i] = aux.log_pi0[i] + aux.log_emit[0][i];
    }
    for t in 1..t_len {
        let m = shifted(&la[t - 1], &mut e);
        for j in 0..k {
            let s: f64 = (0..k).map(|i| e[i] * trans[i][j]).sum();
            la[t][j] = m + s.ln() + aux.log_emit[t][j];
        }
    }
    let mut w = vec![0.0; k];
    for t in (0..t_len.saturating_sub(1)).rev() {
        for j in 0..k {
            w[j] = aux.log_emit[t + 1][j] + lb[t + 1][j];
        }
        let m = shifted(&w, &mut e);
        for i in 0..k {
            let s: f64 = trans[i].iter().zip(&e).map(|(a, b)| a * b).sum();
            lb[t][i] = m + s.ln();
        }
    }
    let log_z = log_sum_exp(&la[t_len - 1]);
    let unary: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let row: Vec<f64> = (0..k)
                .map(|i| (la[t][i] + lb[t][i] - log_z).exp())
                .collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|p| p / s).collect()
        })
        .collect();
    let mut fwd = Vec::with_capacity(k);
    let pairwise: Vec<Vec<Vec<f64>>> = (1..t_len)
        .map(|t| {
            shifted(&la[t - 1], &mut fwd);
            for j in 0..k {
                w[j] = aux.log_emit[t][j] + lb[t][j];
            }
            shifted(&w, &mut e);
            let mut slice: Vec<Vec<f64>> = (0..k)
                .map(|i| (0..k).map(|j| fwd[i] * trans[i][j] * e[j]).collect())
                .collect();
            let s: f64 = slice.iter().flatten().sum();
            slice.iter_mut().flatten().for_each(|p| *p /= s);
            slice
        })
        .collect();
    let entropy = chain_entropy(aux, &unary, &pairwise, log_z);
    ModeMarginals {
        unary,
        pairwise,
        log_z,
        entropy,
    }
}

/// `H(Q(S)) = ln Z - E_Q[ln π̂₀ + Σ ln π̂ + Σ ln ê]`.
fn chain_entropy(
    aux: &AuxiliaryHMM,
    unary: &[Vec<f64>],
    pairwise: &[Vec<Vec<f64>>],
    log_z: f64,
) -> f64 {
    let mut e = 0.0;
    for (i, &g) in unary[0].iter().enumerate() {
        if g > 0.0 {
            e += g * aux.log_pi0[i];
        }
    }
    for slice in pairwise {
        for (i, row) in slice.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if x > 0.0 {
                    e += x * aux.log_trans[i][j];
                }
            }
        }
    }
    for (row, em) in unary.iter().zip(&aux.log_emit) {
        for (&g, &l) in row.iter().zip(em) {
            if g > 0.0 {
                e += g * l;
            }
        }
    }
    (log_z - e).max(0.0)
}

/// Most probable mode path; ties go to the lowest mode index.
pub fn map_sequence(aux: &AuxiliaryHMM) -> Vec<usize> {
    let t_len = aux.len();
    let k = aux.k();
    if t_len == 0 {
        return Vec::new();
    }
    let mut delta: Vec<f64> = (0..k)
        .map(|i| aux.log_pi0[i] + aux.log_emit[0][i])
        .collect();
    let mut back = vec![vec![0usize; k]; t_len];
    for t in 1..t_len {
        let mut next = vec![0.0; k];
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, d) in delta.iter().enumerate() {
                let v = d + aux.log_trans[i][j];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + aux.log_emit[t][j];
            back[t][j] = arg;
        }
        delta = next;
    }
    let mut state = 0;
    for i in 1..k {
        if delta[i] > delta[state] {
            state = i;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = state;
    for t in (1..t_len).rev() {
        state = back[t][state];
        path[t - 1] = state;
    }
    path
}
