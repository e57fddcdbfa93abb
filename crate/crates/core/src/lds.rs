//! Auxiliary time-varying LDS and its Rauch-Tung-Striebel smoother.
//!
//! The auxiliary model is built so that its posterior over `X` equals the
//! optimal `Q(X)` given the current `Q(S)` and `Q(Θ)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{add_jitter, spd_inverse, spd_inverse_logdet, symmetrize, SPD_JITTER};
use crate::model::{ObservationSet, VariationalPosterior};
use crate::moments::ModeExpectations;

#[derive(Debug, Clone)]
pub struct AuxiliaryLDS {
    pub h_hat: Vec<DMatrix<f64>>,
    pub r_hat: Vec<DMatrix<f64>>,
    /// `f_hat[t - 1]` drives the step `x_{t-1} → x_t`, for `t = 1..T` (0-based).
    pub f_hat: Vec<DMatrix<f64>>,
    pub u_hat: Vec<DMatrix<f64>>,
    pub mu_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
}

impl AuxiliaryLDS {
    pub fn len(&self) -> usize {
        self.h_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_hat.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SmoothedMoments {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    /// `cross[t - 1] = E[x_t x_{t-1}ᵀ]`.
    pub cross: Vec<DMatrix<f64>>,
    pub second: Vec<DMatrix<f64>>,
    pub entropy: f64,
}

fn mix_matrix<'a>(
    weights: &[f64],
    mats: impl Iterator<Item = &'a DMatrix<f64>>,
    r: usize,
    c: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(r, c);
    for (w, m) in weights.iter().zip(mats) {
        if *w != 0.0 {
            let w = *w;
            out.zip_apply(m, |a, b| *a += w * b);
        }
    }
    out
}

fn mix_vector<'a>(
    weights: &[f64],
    vecs: impl Iterator<Item = &'a DVector<f64>>,
    n: usize,
) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    for (w, v) in weights.iter().zip(vecs) {
        if *w != 0.0 {
            out.axpy(*w, v, 1.0);
        }
    }
    out
}

/// Builds the auxiliary LDS from the posterior and the unary mode marginals.
pub fn compute_lambda_x(post: &VariationalPosterior, unary: &[Vec<f64>]) -> Result<AuxiliaryLDS> {
    compute_lambda_x_with(&ModeExpectations::from_posterior(post), unary)
}

/// Backward recursion over `t` with precomputed per-mode expectations.
///
/// The base precision is `I` for `t ≥ 2` (unit process noise) and
/// `Σ_i q(s_1=i) E[Σ_i⁻¹]` at `t = 1`, the precision of the initial state.
pub fn compute_lambda_x_with(
    exps: &[ModeExpectations],
    unary: &[Vec<f64>],
) -> Result<AuxiliaryLDS> {
    let t_len = unary.len();
    if t_len == 0 {
        return Err(Error::InvalidInput("empty mode marginals".into()));
    }
    let dx = exps[0].f.nrows();
    let dz = exps[0].rho.len();
    let mut h_hat = vec![DMatrix::zeros(0, 0); t_len];
    let mut r_hat = vec![DMatrix::zeros(0, 0); t_len];
    let mut u_hat = vec![DMatrix::zeros(0, 0); t_len];
    let mut f_hat = vec![DMatrix::zeros(0, 0); t_len - 1];
    // F̂_{t+1}ᵀ Û_{t+1}⁻¹ F̂_{t+1} and Σ q(s_{t+1}) E[FᵀF] from the later step
    let mut carry: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut mu_hat = DVector::zeros(dx);
    let mut sigma_hat = DMatrix::zeros(dx, dx);
    for t in (0..t_len).rev() {
        let q = &unary[t];
        let rho_mix = mix_vector(q, exps.iter().map(|e| &e.rho), dz);
        let mut r = DMatrix::zeros(dz, dz);
        for d in 0..dz {
            if !(rho_mix[d] > 0.0) {
                return Err(Error::numerical(format!(
                    "mixed observation precision not positive at t={}",
                    t + 1
                )));
            }
            r[(d, d)] = 1.0 / rho_mix[d];
        }
        let rh = mix_matrix(q, exps.iter().map(|e| &e.rinv_h), dz, dx);
        let h = &r * &rh;
        let htrh = mix_matrix(q, exps.iter().map(|e| &e.htrh), dx, dx);
        let mut uinv = if t == 0 {
            DMatrix::from_diagonal(&mix_vector(q, exps.iter().map(|e| &e.sigma_inv), dx))
        } else {
            DMatrix::identity(dx, dx)
        };
        uinv += htrh - rh.transpose() * &h;
        if let Some((ftf_mix, fuf)) = carry.take() {
            uinv += ftf_mix - fuf;
        }
        symmetrize(&mut uinv);
        add_jitter(&mut uinv, SPD_JITTER);
        let u = spd_inverse(&uinv, &format!("auxiliary precision at t={}", t + 1))?;
        if t > 0 {
            let f_mix = mix_matrix(q, exps.iter().map(|e| &e.f), dx, dx);
            let ftf_mix = mix_matrix(q, exps.iter().map(|e| &e.ftf), dx, dx);
            let fh = &u * &f_mix;
            // F̂ᵀ Û⁻¹ F̂ = F_mixᵀ Û F_mix
            let fuf = f_mix.transpose() * &fh;
            f_hat[t - 1] = fh;
            carry = Some((ftf_mix, fuf));
        } else {
            mu_hat = &u * mix_vector(q, exps.iter().map(|e| &e.sigma_inv_mu), dx);
            sigma_hat = u.clone();
        }
        h_hat[t] = h;
        r_hat[t] = r;
        u_hat[t] = u;
    }
    Ok(AuxiliaryLDS {
        h_hat,
        r_hat,
        f_hat,
        u_hat,
        mu_hat,
        sigma_hat,
    })
}

const LN_2PI_E: f64 = 2.837_877_066_409_345_3;

/// Kalman filter followed by the RTS backward pass. `z` is `T × d_z`.
pub fn rts_smooth(aux: &AuxiliaryLDS, z: &DMatrix<f64>) -> Result<SmoothedMoments> {
    let t_len = aux.len();
    if z.nrows() != t_len {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for an auxiliary model of length {t_len}",
            z.nrows()
        )));
    }
    let dx = aux.mu_hat.len();
    let mut m_pred = aux.mu_hat.clone();
    let mut p_pred = aux.sigma_hat.clone();
    let mut mf = Vec::with_capacity(t_len);
    let mut pf = Vec::with_capacity(t_len);
    let mut mp = Vec::with_capacity(t_len);
    let mut pp = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t > 0 {
            let f = &aux.f_hat[t - 1];
            m_pred = f * &mf[t - 1];
            p_pred = f * &pf[t - 1] * f.transpose() + &aux.u_hat[t];
            symmetrize(&mut p_pred);
        }
        let h = &aux.h_hat[t];
        let ph = &p_pred * h.transpose();
        let mut s = h * &ph + &aux.r_hat[t];
        symmetrize(&mut s);
        let s_inv = spd_inverse(&s, &format!("innovation covariance at t={}", t + 1))?;
        let gain = &ph * s_inv;
        let innov = z.row(t).transpose() - h * &m_pred;
        let m = &m_pred + &gain * innov;
        let mut p = &p_pred - &gain * ph.transpose();
        symmetrize(&mut p);
        mf.push(m);
        pf.push(p);
        mp.push(m_pred.clone());
        pp.push(p_pred.clone());
    }

    let mut mean = mf.clone();
    let mut cov = pf.clone();
    let mut cross = vec![DMatrix::zeros(dx, dx); t_len.saturating_sub(1)];
    let (_, ld_last) = spd_inverse_logdet(&cov[t_len - 1], "smoothed covariance")?;
    let mut entropy = 0.5 * (dx as f64 * LN_2PI_E + ld_last);
    for t in (0..t_len - 1).rev() {
        let f = &aux.f_hat[t];
        let (pp_inv, ld_pp) =
            spd_inverse_logdet(&pp[t + 1], &format!("predicted covariance at t={}", t + 2))?;
        let j = &pf[t] * f.transpose() * pp_inv;
        let m = &mf[t] + &j * (&mean[t + 1] - &mp[t + 1]);
        let mut p = &pf[t] + &j * (&cov[t + 1] - &pp[t + 1]) * j.transpose();
        symmetrize(&mut p);
        cross[t] = &cov[t + 1] * j.transpose() + &mean[t + 1] * m.transpose();
        // |Cov(x_t | x_{t+1})| = |P_f| |Û_{t+1}| / |P_pred|
        let ld_f =
            crate::linalg::spd_logdet(&pf[t], &format!("filtered covariance at t={}", t + 1))?;
        let ld_u = crate::linalg::spd_logdet(
            &aux.u_hat[t + 1],
            &format!("auxiliary covariance at t={}", t + 2),
        )?;
        entropy += 0.5 * (dx as f64 * LN_2PI_E + ld_f + ld_u - ld_pp);
        mean[t] = m;
        cov[t] = p;
    }
    let second = mean
        .iter()
        .zip(&cov)
        .map(|(m, p)| p + m * m.transpose())
        .collect();
    if !entropy.is_finite() {
        return Err(Error::numerical("entropy of Q(X) is not finite"));
    }
    Ok(SmoothedMoments {
        mean,
        cov,
        cross,
        second,
        entropy,
    })
}

/// Per-`t` sums over sequences of the smoothed moments and of the
/// observation products they meet in the updates.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub n_seq: usize,
    pub sum_x: Vec<DVector<f64>>,
    pub sum_xx: Vec<DMatrix<f64>>,
    /// `sum_cross[t - 1] = Σ_n E[x_tⁿ x_{t-1}ⁿᵀ]`.
    pub sum_cross: Vec<DMatrix<f64>>,
    /// `Σ_n z_tⁿ E[x_tⁿ]ᵀ`.
    pub sum_zx: Vec<DMatrix<f64>>,
    /// `Σ_n (z_{t,d}ⁿ)²`.
    pub sum_zz: Vec<DVector<f64>>,
    pub entropy: f64,
}

impl SuffStats {
    pub fn len(&self) -> usize {
        self.sum_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum_x.is_empty()
    }
}

/// Aggregates smoothed moments over sequences.
pub fn sufficient_stats(sm: &[SmoothedMoments], obs: &ObservationSet) -> Result<SuffStats> {
    if sm.len() != obs.n_seq() {
        return Err(Error::DimensionMismatch(format!(
            "{} smoothed sequences for {} observed",
            sm.len(),
            obs.n_seq()
        )));
    }
    let t_len = obs.len();
    if let Some(bad) = sm.iter().find(|s| s.mean.len() != t_len) {
        return Err(Error::DimensionMismatch(format!(
            "sequence of length {} where {t_len} expected",
            bad.mean.len()
        )));
    }
    let dx = sm[0].mean[0].len();
    let dz = obs.dim();
    let mut st = SuffStats {
        n_seq: sm.len(),
        sum_x: vec![DVector::zeros(dx); t_len],
        sum_xx: vec![DMatrix::zeros(dx, dx); t_len],
        sum_cross: vec![DMatrix::zeros(dx, dx); t_len - 1],
        sum_zx: vec![DMatrix::zeros(dz, dx); t_len],
        sum_zz: vec![DVector::zeros(dz); t_len],
        entropy: 0.0,
    };
    for (n, s) in sm.iter().enumerate() {
        let z = &obs.sequences[n];
        for t in 0..t_len {
            st.sum_x[t] += &s.mean[t];
            st.sum_xx[t] += &s.second[t];
            let zt = z.row(t).transpose();
            st.sum_zx[t] += &zt * s.mean[t].transpose();
            st.sum_zz[t] += zt.component_mul(&zt);
            if t > 0 {
                st.sum_cross[t - 1] += &s.cross[t - 1];
            }
        }
        st.entropy += s.entropy;
    }
    Ok(st)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{init_posterior, Hyperparameters};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| s * (2.0 * rng.random::<f64>() - 1.0))
    }

    fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = rand_mat(rng, n, n, 1.0);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.3
    }

    pub(crate) fn random_aux(
        rng: &mut ChaCha8Rng,
        t_len: usize,
        dx: usize,
        dz: usize,
    ) -> AuxiliaryLDS {
        AuxiliaryLDS {
            h_hat: (0..t_len).map(|_| rand_mat(rng, dz, dx, 1.5)).collect(),
            r_hat: (0..t_len).map(|_| rand_spd(rng, dz)).collect(),
            f_hat: (1..t_len).map(|_| rand_mat(rng, dx, dx, 1.0)).collect(),
            u_hat: (0..t_len).map(|_| rand_spd(rng, dx)).collect(),
            mu_hat: DVector::from_fn(dx, |_, _| rng.random::<f64>() - 0.5),
            sigma_hat: rand_spd(rng, dx),
        }
    }

    /// Posterior mean, covariance and entropy of the stacked state by dense
    /// Gaussian conditioning.
    pub(crate) fn dense_posterior(
        aux: &AuxiliaryLDS,
        z: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, f64) {
        let t_len = aux.len();
        let dx = aux.mu_hat.len();
        let n = t_len * dx;
        let mut prec = DMatrix::zeros(n, n);
        let mut lin = DVector::zeros(n);
        let s_inv = aux.sigma_hat.clone().try_inverse().unwrap();
        prec.view_mut((0, 0), (dx, dx)).add_assign(&s_inv);
        lin.rows_mut(0, dx).add_assign(&(&s_inv * &aux.mu_hat));
        for t in 1..t_len {
            let u_inv = aux.u_hat[t].clone().try_inverse().unwrap();
            let f = &aux.f_hat[t - 1];
            let (a, b) = (t * dx, (t - 1) * dx);
            prec.view_mut((a, a), (dx, dx)).add_assign(&u_inv);
            prec.view_mut((b, b), (dx, dx))
                .add_assign(&(f.transpose() * &u_inv * f));
            let off = -(&u_inv * f);
            prec.view_mut((a, b), (dx, dx)).add_assign(&off);
            prec.view_mut((b, a), (dx, dx)).add_assign(&off.transpose());
        }
        for t in 0..t_len {
            let r_inv = aux.r_hat[t].clone().try_inverse().unwrap();
            let h = &aux.h_hat[t];
            let a = t * dx;
            prec.view_mut((a, a), (dx, dx))
                .add_assign(&(h.transpose() * &r_inv * h));
            lin.rows_mut(a, dx)
                .add_assign(&(h.transpose() * &r_inv * z.row(t).transpose()));
        }
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * lin;
        let entropy = 0.5 * (n as f64 * LN_2PI_E + cov.determinant().ln());
        (mean, cov, entropy)
    }

    use std::ops::AddAssign;

    fn check_against_dense(aux: &AuxiliaryLDS, z: &DMatrix<f64>, tol: f64) {
        let sm = rts_smooth(aux, z).unwrap();
        let (mean, cov, ent) = dense_posterior(aux, z);
        let dx = aux.mu_hat.len();
        for t in 0..aux.len() {
            for i in 0..dx {
                assert!((sm.mean[t][i] - mean[t * dx + i]).abs() < tol);
                for j in 0..dx {
                    assert!((sm.cov[t][(i, j)] - cov[(t * dx + i, t * dx + j)]).abs() < tol);
                    if t > 0 {
                        let c = cov[(t * dx + i, (t - 1) * dx + j)]
                            + mean[t * dx + i] * mean[(t - 1) * dx + j];
                        assert!((sm.cross[t - 1][(i, j)] - c).abs() < tol);
                    }
                }
            }
        }
        assert!((sm.entropy - ent).abs() < 1e-6, "{} vs {}", sm.entropy, ent);
    }

    #[test]
    fn scalar_bayes_update() {
        let aux = AuxiliaryLDS {
            h_hat: vec![DMatrix::identity(1, 1)],
            r_hat: vec![DMatrix::identity(1, 1)],
            f_hat: vec![],
            u_hat: vec![DMatrix::identity(1, 1)],
            mu_hat: DVector::zeros(1),
            sigma_hat: DMatrix::identity(1, 1),
        };
        let sm = rts_smooth(&aux, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((sm.mean[0][0] - 0.5).abs() < 1e-15);
        assert!((sm.cov[0][(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_observations_follow_prior_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut aux = random_aux(&mut rng, 5, 2, 2);
        for r in aux.r_hat.iter_mut() {
            *r = DMatrix::identity(2, 2) * 1e12;
        }
        let z = rand_mat(&mut rng, 5, 2, 1.0);
        let sm = rts_smooth(&aux, &z).unwrap();
        let mut m = aux.mu_hat.clone();
        for t in 0..5 {
            if t > 0 {
                m = &aux.f_hat[t - 1] * m;
            }
            assert!((&sm.mean[t] - &m).amax() < 1e-6);
        }
    }

    #[test]
    fn matches_dense_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let t_len = rng.random_range(1..=5);
            let dx = rng.random_range(1..=2);
            let dz = rng.random_range(1..=2);
            let aux = random_aux(&mut rng, t_len, dx, dz);
            let z = rand_mat(&mut rng, t_len, dz, 2.0);
            check_against_dense(&aux, &z, 1e-8);
        }
    }

    #[test]
    fn smoothed_covariances_are_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let aux = random_aux(&mut rng, 30, 3, 2);
        let z = rand_mat(&mut rng, 30, 2, 2.0);
        let sm = rts_smooth(&aux, &z).unwrap();
        for (c, (s, m)) in sm.cov.iter().zip(sm.second.iter().zip(&sm.mean)) {
            assert!(crate::linalg::min_eigenvalue(c) > 0.0);
            assert!(crate::linalg::min_eigenvalue(&(s - m * m.transpose())) > 0.0);
        }
    }

    /// Line-by-line transcription of the backward recursion on scalars and
    /// explicit 2×2 arithmetic, without the mixing helpers.
    fn lambda_oracle(exps: &[ModeExpectations], q: &[Vec<f64>]) -> AuxiliaryLDS {
        let t_len = q.len();
        let k = exps.len();
        let dx = 2;
        let dz = 2;
        let mut out = AuxiliaryLDS {
            h_hat: vec![DMatrix::zeros(dz, dx); t_len],
            r_hat: vec![DMatrix::zeros(dz, dz); t_len],
            f_hat: vec![DMatrix::zeros(dx, dx); t_len - 1],
            u_hat: vec![DMatrix::zeros(dx, dx); t_len],
            mu_hat: DVector::zeros(dx),
            sigma_hat: DMatrix::zeros(dx, dx),
        };
        let mut t = t_len;
        while t > 0 {
            t -= 1;
            let mut r_inv = DMatrix::zeros(dz, dz);
            let mut rh = DMatrix::zeros(dz, dx);
            let mut htrh = DMatrix::zeros(dx, dx);
            for i in 0..k {
                for d in 0..dz {
                    r_inv[(d, d)] += q[t][i] * exps[i].rho[d];
                    for c in 0..dx {
                        rh[(d, c)] += q[t][i] * exps[i].rinv_h[(d, c)];
                    }
                }
                for a in 0..dx {
                    for b in 0..dx {
                        htrh[(a, b)] += q[t][i] * exps[i].htrh[(a, b)];
                    }
                }
            }
            let r = r_inv.clone().try_inverse().unwrap();
            let h = &r * &rh;
            let mut uinv = DMatrix::identity(dx, dx);
            if t == 0 {
                uinv = DMatrix::zeros(dx, dx);
                for i in 0..k {
                    for d in 0..dx {
                        uinv[(d, d)] += q[0][i] * exps[i].sigma_inv[d];
                    }
                }
            }
            uinv += &htrh - h.transpose() * &r_inv * &h;
            if t + 1 < t_len {
                let mut g = DMatrix::zeros(dx, dx);
                for i in 0..k {
                    g += &exps[i].ftf * q[t + 1][i];
                }
                let u_next_inv = out.u_hat[t + 1].clone().try_inverse().unwrap();
                uinv += g - out.f_hat[t].transpose() * u_next_inv * &out.f_hat[t];
            }
            let uinv = (&uinv + uinv.transpose()) * 0.5 + DMatrix::identity(dx, dx) * SPD_JITTER;
            let u = uinv.try_inverse().unwrap();
            if t > 0 {
                let mut fm = DMatrix::zeros(dx, dx);
                for i in 0..k {
                    fm += &exps[i].f * q[t][i];
                }
                out.f_hat[t - 1] = &u * fm;
            } else {
                let mut lin = DVector::zeros(dx);
                for i in 0..k {
                    lin += &exps[i].sigma_inv_mu * q[0][i];
                }
                out.mu_hat = &u * lin;
                out.sigma_hat = u.clone();
            }
            out.h_hat[t] = h;
            out.r_hat[t] = r;
            out.u_hat[t] = u;
        }
        out
    }

    pub(crate) fn random_posterior(
        rng: &mut ChaCha8Rng,
        k: usize,
        dx: usize,
        dz: usize,
    ) -> VariationalPosterior {
        let hp = Hyperparameters::new(k.max(2), dx, dz);
        let mut post = init_posterior(&hp);
        for i in 0..post.k() {
            post.mu_mean[i] = DVector::from_fn(dx, |_, _| rng.random::<f64>() - 0.5);
            post.mu_prec[i] = DVector::from_element(dx, 0.5 + rng.random::<f64>());
            post.sigma_a[i] = DVector::from_fn(dx, |_, _| 1.0 + 3.0 * rng.random::<f64>());
            post.sigma_b[i] = DVector::from_fn(dx, |_, _| 0.5 + rng.random::<f64>());
            post.f_mean[i] = rand_mat(rng, dx, dx, 1.0);
            post.f_cov[i] = rand_spd(rng, dx) * 0.1;
            post.h_mean[i] = rand_mat(rng, dz, dx, 1.0);
            post.h_cov[i] = rand_spd(rng, dx) * 0.1;
            post.rho_a[i] = DVector::from_fn(dz, |_, _| 1.0 + 3.0 * rng.random::<f64>());
            post.rho_b[i] = DVector::from_fn(dz, |_, _| 0.5 + rng.random::<f64>());
        }
        post
    }

    pub(crate) fn random_marginals(rng: &mut ChaCha8Rng, t_len: usize, k: usize) -> Vec<Vec<f64>> {
        (0..t_len)
            .map(|_| {
                let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect()
    }

    #[test]
    fn lambda_matches_line_by_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let post = random_posterior(&mut rng, 2, 2, 2);
            let q = random_marginals(&mut rng, 4, 2);
            let aux = compute_lambda_x(&post, &q).unwrap();
            let exps = ModeExpectations::from_posterior(&post);
            let oracle = lambda_oracle(&exps, &q);
            let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() < 1e-10;
            for t in 0..4 {
                assert!(close(&aux.h_hat[t], &oracle.h_hat[t]));
                assert!(close(&aux.r_hat[t], &oracle.r_hat[t]));
                assert!(close(&aux.u_hat[t], &oracle.u_hat[t]));
            }
            for t in 0..3 {
                assert!(close(&aux.f_hat[t], &oracle.f_hat[t]));
            }
            assert!((&aux.mu_hat - &oracle.mu_hat).amax() < 1e-10);
        }
    }

    #[test]
    fn one_hot_marginals_give_mode_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let post = random_posterior(&mut rng, 3, 2, 2);
        let q = vec![vec![0.0, 1.0, 0.0]; 3];
        let aux = compute_lambda_x(&post, &q).unwrap();
        let rho = post.rho_a[1].component_div(&post.rho_b[1]);
        for t in 0..3 {
            for d in 0..2 {
                assert!((1.0 / aux.r_hat[t][(d, d)] - rho[d]).abs() < 1e-12);
            }
        }
    }

    /// With vanishing posterior spread, the auxiliary smoother must agree with
    /// a plain LDS smoother run on the posterior means.
    #[test]
    fn single_mode_point_mass_reproduces_lds() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (dx, dz, t_len) = (2, 2, 6);
        let hp = Hyperparameters::new(2, dx, dz);
        let mut post = init_posterior(&hp);
        let f = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.2]);
        let rho = [2.0, 0.5];
        let sig = [1.5, 0.7];
        let mu = DVector::from_row_slice(&[0.3, -0.4]);
        let big = 1e12;
        for i in 0..2 {
            post.f_mean[i] = f.clone();
            post.f_cov[i] = DMatrix::identity(dx, dx) / big;
            post.h_mean[i] = h.clone();
            post.h_cov[i] = DMatrix::identity(dx, dx) / big;
            post.rho_a[i] = DVector::from_fn(dz, |d, _| rho[d] * big);
            post.rho_b[i] = DVector::from_element(dz, big);
            post.sigma_a[i] = DVector::from_fn(dx, |d, _| sig[d] * big);
            post.sigma_b[i] = DVector::from_element(dx, big);
            post.mu_mean[i] = mu.clone();
            post.mu_prec[i] = DVector::from_element(dx, big);
        }
        let q = vec![vec![1.0, 0.0]; t_len];
        let aux = compute_lambda_x(&post, &q).unwrap();
        let z = rand_mat(&mut rng, t_len, dz, 2.0);
        let sm = rts_smooth(&aux, &z).unwrap();

        let plain = AuxiliaryLDS {
            h_hat: vec![h.clone(); t_len],
            r_hat: vec![DMatrix::from_diagonal(&DVector::from_fn(dz, |d, _| 1.0 / rho[d])); t_len],
            f_hat: vec![f.clone(); t_len - 1],
            u_hat: vec![DMatrix::identity(dx, dx); t_len],
            mu_hat: mu.clone(),
            sigma_hat: DMatrix::from_diagonal(&DVector::from_fn(dx, |d, _| 1.0 / sig[d])),
        };
        let (mean, cov, _) = dense_posterior(&plain, &z);
        for t in 0..t_len {
            for i in 0..dx {
                assert!((sm.mean[t][i] - mean[t * dx + i]).abs() < 1e-6);
                assert!((sm.cov[t][(i, i)] - cov[(t * dx + i, t * dx + i)]).abs() < 1e-6);
            }
        }
    }

    fn smoothed(rng: &mut ChaCha8Rng, t_len: usize) -> SmoothedMoments {
        let aux = random_aux(rng, t_len, 2, 2);
        rts_smooth(&aux, &rand_mat(rng, t_len, 2, 1.0)).unwrap()
    }

    #[test]
    fn single_sequence_stats_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sm = smoothed(&mut rng, 4);
        let obs = ObservationSet::new(vec![rand_mat(&mut rng, 4, 2, 1.0)]).unwrap();
        let st = sufficient_stats(std::slice::from_ref(&sm), &obs).unwrap();
        assert_eq!(st.sum_x, sm.mean);
        assert_eq!(st.sum_xx, sm.second);
        assert_eq!(st.sum_cross, sm.cross);
    }

    #[test]
    fn duplicated_sequences_double_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sm = smoothed(&mut rng, 4);
        let z = rand_mat(&mut rng, 4, 2, 1.0);
        let one = sufficient_stats(
            std::slice::from_ref(&sm),
            &ObservationSet::new(vec![z.clone()]).unwrap(),
        )
        .unwrap();
        let two = sufficient_stats(
            &[sm.clone(), sm],
            &ObservationSet::new(vec![z.clone(), z]).unwrap(),
        )
        .unwrap();
        for t in 0..4 {
            assert_eq!(two.sum_xx[t], &one.sum_xx[t] * 2.0);
            assert_eq!(two.sum_zx[t], &one.sum_zx[t] * 2.0);
        }
    }

    #[test]
    fn three_sequence_stats_match_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sms: Vec<_> = (0..3).map(|_| smoothed(&mut rng, 5)).collect();
        let zs: Vec<_> = (0..3).map(|_| rand_mat(&mut rng, 5, 2, 1.0)).collect();
        let st = sufficient_stats(&sms, &ObservationSet::new(zs.clone()).unwrap()).unwrap();
        for t in 0..5 {
            for a in 0..2 {
                let x: f64 = sms.iter().map(|s| s.mean[t][a]).sum();
                assert!((st.sum_x[t][a] - x).abs() < 1e-14);
                for b in 0..2 {
                    let zx: f64 = (0..3).map(|n| zs[n][(t, a)] * sms[n].mean[t][b]).sum();
                    assert!((st.sum_zx[t][(a, b)] - zx).abs() < 1e-14);
                }
            }
        }
        assert!((st.entropy - sms.iter().map(|s| s.entropy).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let sm = smoothed(&mut rng, 4);
        let obs = ObservationSet::new(vec![rand_mat(&mut rng, 5, 2, 1.0)]).unwrap();
        assert!(sufficient_stats(&[sm], &obs).is_err());
    }
}
