//! Gaussian-emission HMM fitted by Baum-Welch, with Viterbi decoding.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chain::{forward_backward, map_sequence, AuxiliaryHMM};
use crate::cluster::kmeans;
use crate::dist::safe_ln;
use crate::error::{Error, Result};

/// Smallest eigenvalue allowed in an emission covariance.
pub const COV_FLOOR: f64 = 1e-6;
/// Total responsibility below which a state counts as degenerate.
const EMPTY_STATE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianHmm {
    pub init_probs: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    /// `n_states × d_z`.
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GaussianHmm,
    /// Log-likelihood before each M-step, so `log_likelihood[0]` scores the
    /// initial model.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl GaussianHmm {
    pub fn n_states(&self) -> usize {
        self.init_probs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        if k == 0 || self.trans.len() != k || self.means.len() != k || self.covs.len() != k {
            return Err(Error::DimensionMismatch(
                "state counts of the HMM blocks differ".into(),
            ));
        }
        let rows = std::iter::once(&self.init_probs).chain(self.trans.iter());
        for row in rows {
            if row.len() != k
                || row.iter().any(|p| !(*p >= 0.0))
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-10
            {
                return Err(Error::InvalidInput(
                    "HMM probabilities must form stochastic rows".into(),
                ));
            }
        }
        for c in &self.covs {
            if to_matrix(c).cholesky().is_none() {
                return Err(Error::InvalidInput(
                    "HMM covariance is not positive definite".into(),
                ));
            }
        }
        Ok(())
    }

    /// Auxiliary chain with Gaussian log densities as emissions.
    fn chain(&self, z: &DMatrix<f64>) -> Result<AuxiliaryHMM> {
        let d = z.ncols();
        let mut log_emit = vec![vec![0.0; self.n_states()]; z.nrows()];
        for (i, (mean, cov)) in self.means.iter().zip(&self.covs).enumerate() {
            if mean.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "model has {} channels, data {d}",
                    mean.len()
                )));
            }
            let chol = to_matrix(cov).cholesky().ok_or_else(|| {
                Error::numerical(format!("covariance of state {i} is not positive definite"))
            })?;
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let mu = DVector::from_column_slice(mean);
            for (t, row) in log_emit.iter_mut().enumerate() {
                let r = z.row(t).transpose() - &mu;
                let maha = r.dot(&chol.solve(&r));
                row[i] = -0.5 * (d as f64 * std::f64::consts::TAU.ln() + log_det + maha);
            }
        }
        Ok(AuxiliaryHMM {
            log_pi0: self.init_probs.iter().map(|&p| safe_ln(p)).collect(),
            log_trans: self
                .trans
                .iter()
                .map(|r| r.iter().map(|&p| safe_ln(p)).collect())
                .collect(),
            log_emit,
        })
    }

    pub fn log_likelihood(&self, z: &DMatrix<f64>) -> Result<f64> {
        Ok(forward_backward(&self.chain(z)?).log_z)
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.len(), |r, c| rows[r][c])
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

/// Raises every eigenvalue of a symmetric matrix to at least [`COV_FLOOR`].
fn floor_covariance(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(COV_FLOOR));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn sample_moments(z: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let t = z.nrows() as f64;
    let mean = z.row_mean().transpose();
    let mut cov = DMatrix::zeros(z.ncols(), z.ncols());
    for r in z.row_iter() {
        let c = r.transpose() - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / t)
}

/// Baum-Welch from k-means means, the pooled covariance, uniform initial
/// probabilities and a transition matrix with 0.9 on the diagonal.
///
/// A state that loses all responsibility gets the data covariance back and
/// keeps its mean. Stops when the relative change of the log-likelihood
/// falls below `tol`.
pub fn em_fit(
    z: &DMatrix<f64>,
    n_states: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<EmFit> {
    let (t_len, d) = z.shape();
    if n_states == 0 {
        return Err(Error::positive("n_states", 0.0));
    }
    if t_len <= n_states {
        return Err(Error::InvalidInput(format!(
            "{t_len} samples cannot support {n_states} states"
        )));
    }
    let (_, data_cov) = sample_moments(z);
    let data_cov = floor_covariance(data_cov);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<DVector<f64>> = z.row_iter().map(|r| r.transpose()).collect();
    let (centers, _) = kmeans(&points, n_states, 100, &mut rng);
    let stay = if n_states == 1 { 1.0 } else { 0.9 };
    let leave = if n_states == 1 {
        0.0
    } else {
        0.1 / (n_states - 1) as f64
    };
    let mut model = GaussianHmm {
        init_probs: vec![1.0 / n_states as f64; n_states],
        trans: (0..n_states)
            .map(|i| {
                (0..n_states)
                    .map(|j| if i == j { stay } else { leave })
                    .collect()
            })
            .collect(),
        means: centers
            .iter()
            .map(|c| c.iter().copied().collect())
            .collect(),
        covs: vec![to_rows(&data_cov); n_states],
    };
    let mut lls: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let marg = forward_backward(&model.chain(z)?);
        if !marg.log_z.is_finite() {
            return Err(Error::numerical("non-finite log-likelihood in Baum-Welch"));
        }
        if let Some(&prev) = lls.last() {
            if ((marg.log_z - prev) / prev.abs().max(1e-300)).abs() < tol {
                lls.push(marg.log_z);
                converged = true;
                break;
            }
        }
        lls.push(marg.log_z);
        iterations += 1;

        model.init_probs = marg.unary[0].clone();
        for i in 0..n_states {
            let row: Vec<f64> = (0..n_states)
                .map(|j| marg.pairwise.iter().map(|s| s[i][j]).sum())
                .collect();
            let total: f64 = row.iter().sum();
            model.trans[i] = if total > EMPTY_STATE {
                row.iter().map(|x| x / total).collect()
            } else {
                model.trans[i].clone()
            };
            let mass: f64 = marg.unary.iter().map(|g| g[i]).sum();
            if mass < EMPTY_STATE {
                model.covs[i] = to_rows(&data_cov);
                continue;
            }
            let mut mean = DVector::zeros(d);
            for (g, r) in marg.unary.iter().zip(z.row_iter()) {
                mean += r.transpose() * g[i];
            }
            mean /= mass;
            let mut cov = DMatrix::zeros(d, d);
            for (g, r) in marg.unary.iter().zip(z.row_iter()) {
                let c = r.transpose() - &mean;
                cov += &c * c.transpose() * g[i];
            }
            model.means[i] = mean.iter().copied().collect();
            model.covs[i] = to_rows(&floor_covariance(cov / mass));
        }
    }
    Ok(EmFit {
        model,
        log_likelihood: lls,
        iterations,
        converged,
    })
}

/// Most probable state path; ties go to the lowest state index.
pub fn viterbi_decode(model: &GaussianHmm, z: &DMatrix<f64>) -> Result<Vec<usize>> {
    model.validate()?;
    Ok(map_sequence(&model.chain(z)?))
}
