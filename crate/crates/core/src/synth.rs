//! Ground-truth sticky SLDS sampler.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::ObservationSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_modes: usize,
    pub dwell_mean: f64,
    pub t_len: usize,
    pub n_seq: usize,
    pub dim_x: usize,
    pub dim_z: usize,
    pub seed: u64,
    /// Per-mode `d_x × d_x` dynamics.
    pub dynamics: Vec<DMatrix<f64>>,
    /// Per-mode `d_z × d_x` emissions.
    pub emissions: Vec<DMatrix<f64>>,
    pub obs_cov: Vec<DMatrix<f64>>,
    pub init_mean: Vec<DVector<f64>>,
    pub init_cov: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub obs: ObservationSet,
    pub modes: Vec<usize>,
    /// `states[n]` is `T × d_x`.
    pub states: Vec<DMatrix<f64>>,
}

fn rotation_xy(angle: f64, d: usize) -> DMatrix<f64> {
    let mut r = DMatrix::identity(d, d);
    if d >= 2 {
        let (s, c) = angle.sin_cos();
        r[(0, 0)] = c;
        r[(0, 1)] = -s;
        r[(1, 0)] = s;
        r[(1, 1)] = c;
    }
    r
}

impl SynthSpec {
    /// Identity emissions, isotropic noise, zero-mean unit initial state, and
    /// dynamics that cycle through `0.9 I`, `-0.9 I` and a damped quarter turn.
    ///
    /// All three dynamics have the same stationary covariance, so the modes are
    /// indistinguishable from marginal statistics and differ only in how
    /// consecutive states relate.
    pub fn benchmark(t_len: usize, dim: usize, dwell_mean: f64, seed: u64) -> Self {
        let eye = DMatrix::identity(dim, dim);
        let mut rot = rotation_xy(std::f64::consts::FRAC_PI_2, dim) * 0.9;
        if dim >= 3 {
            rot[(2, 2)] = -0.9;
        }
        let dynamics = vec![&eye * 0.9, &eye * -0.9, rot];
        SynthSpec {
            n_modes: 3,
            dwell_mean,
            t_len,
            n_seq: 1,
            dim_x: dim,
            dim_z: dim,
            seed,
            dynamics,
            emissions: vec![eye.clone(); 3],
            obs_cov: vec![&eye * 0.5; 3],
            init_mean: vec![DVector::zeros(dim); 3],
            init_cov: vec![eye; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_modes;
        if k == 0 || self.t_len == 0 || self.n_seq == 0 || self.dim_x == 0 || self.dim_z == 0 {
            return Err(Error::InvalidInput(
                "n_modes, t_len, n_seq, dim_x and dim_z must be positive".into(),
            ));
        }
        if !(self.dwell_mean >= 1.0) {
            return Err(Error::InvalidParameter {
                field: "dwell_mean".into(),
                requirement: "at least 1",
                value: self.dwell_mean,
            });
        }
        let counts = [
            ("dynamics", self.dynamics.len()),
            ("emissions", self.emissions.len()),
            ("obs_cov", self.obs_cov.len()),
            ("init_mean", self.init_mean.len()),
            ("init_cov", self.init_cov.len()),
        ];
        if let Some((name, n)) = counts.iter().find(|(_, n)| *n != k) {
            return Err(Error::DimensionMismatch(format!(
                "{name} has {n} entries for {k} modes"
            )));
        }
        for i in 0..k {
            let shape = |m: &DMatrix<f64>, r: usize, c: usize, what: &str| {
                if m.shape() != (r, c) {
                    Err(Error::DimensionMismatch(format!(
                        "{what} of mode {i} is {:?}, expected ({r}, {c})",
                        m.shape()
                    )))
                } else {
                    Ok(())
                }
            };
            shape(&self.dynamics[i], self.dim_x, self.dim_x, "dynamics")?;
            shape(&self.emissions[i], self.dim_z, self.dim_x, "emissions")?;
            shape(&self.obs_cov[i], self.dim_z, self.dim_z, "obs_cov")?;
            shape(&self.init_cov[i], self.dim_x, self.dim_x, "init_cov")?;
            if self.init_mean[i].len() != self.dim_x {
                return Err(Error::DimensionMismatch(format!(
                    "init_mean of mode {i} has wrong length"
                )));
            }
            let radius = self.dynamics[i]
                .complex_eigenvalues()
                .iter()
                .map(|c| c.norm())
                .fold(0.0, f64::max);
            if radius > 1.05 {
                return Err(Error::InvalidParameter {
                    field: format!("dynamics[{i}] spectral radius"),
                    requirement: "at most 1.05",
                    value: radius,
                });
            }
            for (what, m) in [
                ("obs_cov", &self.obs_cov[i]),
                ("init_cov", &self.init_cov[i]),
            ] {
                if m.clone().cholesky().is_none() {
                    return Err(Error::InvalidInput(format!(
                        "{what} of mode {i} is not positive definite"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Self-transition probability `1 - 1/dwell_mean`, the rest spread evenly.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.n_modes;
        if k == 1 {
            return vec![vec![1.0]];
        }
        let stay = 1.0 - 1.0 / self.dwell_mean;
        let leave = (1.0 - stay) / (k - 1) as f64;
        (0..k)
            .map(|i| (0..k).map(|j| if i == j { stay } else { leave }).collect())
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, mean: &DVector<f64>, chol: &DMatrix<f64>) -> DVector<f64> {
    let eps = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol * eps
}

fn categorical(rng: &mut ChaCha8Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Samples a shared mode chain and `N` state/observation sequences with
/// `x_t = F_{s_t} x_{t-1} + v_t`, `v_t ~ N(0, I)`, `z_t = H_{s_t} x_t + w_t`.
pub fn sample_slds(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.n_modes;
    let trans = spec.transition_matrix();
    let mut modes = Vec::with_capacity(spec.t_len);
    modes.push(categorical(&mut rng, &vec![1.0 / k as f64; k]));
    for t in 1..spec.t_len {
        modes.push(categorical(&mut rng, &trans[modes[t - 1]]));
    }
    let chol = |m: &DMatrix<f64>| m.clone().cholesky().expect("validated").l();
    let obs_chol: Vec<_> = spec.obs_cov.iter().map(chol).collect();
    let init_chol: Vec<_> = spec.init_cov.iter().map(chol).collect();
    let eye = DMatrix::identity(spec.dim_x, spec.dim_x);
    let zero_x = DVector::zeros(spec.dim_x);
    let zero_z = DVector::zeros(spec.dim_z);
    let mut states = Vec::with_capacity(spec.n_seq);
    let mut sequences = Vec::with_capacity(spec.n_seq);
    for _ in 0..spec.n_seq {
        let mut xs = DMatrix::zeros(spec.t_len, spec.dim_x);
        let mut zs = DMatrix::zeros(spec.t_len, spec.dim_z);
        let mut x = gaussian(&mut rng, &spec.init_mean[modes[0]], &init_chol[modes[0]]);
        for t in 0..spec.t_len {
            let s = modes[t];
            if t > 0 {
                x = &spec.dynamics[s] * &x + gaussian(&mut rng, &zero_x, &eye);
            }
            let z = &spec.emissions[s] * &x + gaussian(&mut rng, &zero_z, &obs_chol[s]);
            xs.row_mut(t).copy_from(&x.transpose());
            zs.row_mut(t).copy_from(&z.transpose());
        }
        states.push(xs);
        sequences.push(zs);
    }
    Ok(SynthData {
        obs: ObservationSet::new(sequences)?,
        modes,
        states,
    })
}
