//! Shared domain types: hyperparameters, observations and the variational
//! posterior of the sticky HDP-SLDS.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdp;

/// Fixed model constants. Per-mode quantities are stored with one entry per
/// mode (and per latent dimension where the prior is ARD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Top-level DP concentration.
    pub gamma: f64,
    /// Concentration of the initial-state sticks.
    pub alpha0: f64,
    /// Transition DP concentration.
    pub alpha: f64,
    /// Self-transition bonus.
    pub kappa: f64,
    /// ARD precisions on the rows of each dynamics matrix, `K × d_x`.
    pub zeta: Vec<Vec<f64>>,
    /// ARD precisions on the columns of each emission matrix, `K × d_x`.
    pub eta: Vec<Vec<f64>>,
    /// Gamma shape of the initial-state precision prior, per mode.
    pub a_sigma: Vec<f64>,
    /// Gamma rate of the initial-state precision prior, `K × d_x`.
    pub b_sigma: Vec<Vec<f64>>,
    /// Precision scale of the initial-state mean prior, per mode.
    pub b_mu: Vec<f64>,
    /// Gamma shape of the observation precision prior, per mode.
    pub a_obs: Vec<f64>,
    /// Gamma rate of the observation precision prior, per mode.
    pub b_obs: Vec<f64>,
    pub trunc_k: usize,
    pub dim_x: usize,
    pub dim_z: usize,
    /// Gamma prior on `α + κ`.
    pub a_alpha_prior: f64,
    pub b_alpha_prior: f64,
    /// Beta prior on `κ / (α + κ)`.
    pub u_kappa_prior: f64,
    pub v_kappa_prior: f64,
    pub update_concentrations: bool,
}

impl Hyperparameters {
    /// Defaults that gave the best average bound on accelerometer data:
    /// γ = α₀ = α = 1, ζ = η = 10, κ = 64, K = 20, a_Σ = a = 1, b_μ = b_Σ = b = 100.
    pub fn new(trunc_k: usize, dim_x: usize, dim_z: usize) -> Self {
        let gamma = 1.0;
        let alpha = 1.0;
        let kappa = 64.0;
        Hyperparameters {
            gamma,
            alpha0: 1.0,
            alpha,
            kappa,
            zeta: vec![vec![10.0; dim_x]; trunc_k],
            eta: vec![vec![10.0; dim_x]; trunc_k],
            a_sigma: vec![1.0; trunc_k],
            b_sigma: vec![vec![100.0; dim_x]; trunc_k],
            b_mu: vec![100.0; trunc_k],
            a_obs: vec![1.0; trunc_k],
            b_obs: vec![100.0; trunc_k],
            trunc_k,
            dim_x,
            dim_z,
            a_alpha_prior: alpha + kappa,
            b_alpha_prior: 1.0,
            u_kappa_prior: kappa,
            v_kappa_prior: alpha,
            update_concentrations: false,
        }
    }

    pub fn with_dims(dim_z: usize) -> Self {
        Self::new(20, dim_z, dim_z)
    }

    /// Checks every invariant except the match against observed data.
    pub fn validate(&self) -> Result<()> {
        if self.trunc_k < 2 {
            return Err(Error::InvalidParameter {
                field: "trunc_k".into(),
                requirement: "at least 2",
                value: self.trunc_k as f64,
            });
        }
        if self.dim_x < 1 {
            return Err(Error::InvalidParameter {
                field: "dim_x".into(),
                requirement: "at least 1",
                value: 0.0,
            });
        }
        if self.dim_z < 1 {
            return Err(Error::InvalidParameter {
                field: "dim_z".into(),
                requirement: "at least 1",
                value: 0.0,
            });
        }
        let scalars = [
            ("gamma", self.gamma),
            ("alpha0", self.alpha0),
            ("alpha", self.alpha),
            ("a_alpha_prior", self.a_alpha_prior),
            ("b_alpha_prior", self.b_alpha_prior),
            ("u_kappa_prior", self.u_kappa_prior),
            ("v_kappa_prior", self.v_kappa_prior),
        ];
        for (name, v) in scalars {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::positive(name, v));
            }
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "kappa".into(),
                requirement: "nonnegative",
                value: self.kappa,
            });
        }
        let k = self.trunc_k;
        check_vec("a_sigma", &self.a_sigma, k)?;
        check_vec("b_mu", &self.b_mu, k)?;
        check_vec("a_obs", &self.a_obs, k)?;
        check_vec("b_obs", &self.b_obs, k)?;
        check_table("zeta", &self.zeta, k, self.dim_x)?;
        check_table("eta", &self.eta, k, self.dim_x)?;
        check_table("b_sigma", &self.b_sigma, k, self.dim_x)?;
        Ok(())
    }
}

fn check_vec(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "`{name}` has {} entries, expected {len}",
            v.len()
        )));
    }
    for &x in v {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::positive(name, x));
        }
    }
    Ok(())
}

fn check_table(name: &str, t: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if t.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "`{name}` has {} rows, expected {rows}",
            t.len()
        )));
    }
    for row in t {
        check_vec(name, row, cols)?;
    }
    Ok(())
}

/// `N` synchronized sequences of `T` observations in `R^{d_z}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// One `T × d_z` matrix per sequence.
    pub sequences: Vec<DMatrix<f64>>,
    /// Factor each channel was divided by.
    pub channel_scales: Vec<f64>,
    pub sample_rate_hz: Option<f64>,
}

/// How raw channels are scaled before inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Rescale {
    /// Divide every channel by its pooled sample standard deviation.
    UnitVariance,
    /// Divide channel `c` by the given scale.
    Explicit(Vec<f64>),
}

impl ObservationSet {
    pub fn new(sequences: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::InvalidInput("no observation sequences".into()))?;
        let (t, d) = first.shape();
        if t == 0 || d == 0 {
            return Err(Error::InvalidInput("empty observation sequence".into()));
        }
        for (n, s) in sequences.iter().enumerate() {
            if s.shape() != (t, d) {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {n} is {}x{}, expected {t}x{d}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "sequence {n} has non-finite entries"
                )));
            }
        }
        Ok(ObservationSet {
            sequences,
            channel_scales: vec![1.0; d],
            sample_rate_hz: None,
        })
    }

    pub fn n_seq(&self) -> usize {
        self.sequences.len()
    }

    pub fn len(&self) -> usize {
        self.sequences[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.sequences[0].ncols()
    }

    /// Observation `t` of sequence `n` as a column vector.
    pub fn z(&self, n: usize, t: usize) -> DVector<f64> {
        self.sequences[n].row(t).transpose()
    }

    /// Divides each channel by its scale; `channel_scales` accumulates the factors.
    pub fn rescale(&self, mode: &Rescale) -> Result<ObservationSet> {
        let d = self.dim();
        if self.len() < 2 {
            return Err(Error::InvalidInput(
                "rescaling needs at least two samples".into(),
            ));
        }
        let scales = match mode {
            Rescale::Explicit(s) => {
                if s.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "{} explicit scales for {d} channels",
                        s.len()
                    )));
                }
                for &v in s {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(Error::positive("channel_scales", v));
                    }
                }
                s.clone()
            }
            Rescale::UnitVariance => (0..d)
                .map(|c| {
                    let values: Vec<f64> = self
                        .sequences
                        .iter()
                        .flat_map(|s| s.column(c).iter().copied().collect::<Vec<_>>())
                        .collect();
                    let n = values.len() as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                    let sd = var.sqrt();
                    if !(sd > 1e-12 * mean.abs().max(1.0)) {
                        Err(Error::InvalidInput(format!(
                            "channel {c} has zero variance"
                        )))
                    } else {
                        Ok(sd)
                    }
                })
                .collect::<Result<Vec<f64>>>()?,
        };
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let mut out = s.clone();
                for (c, sc) in scales.iter().enumerate() {
                    out.column_mut(c).iter_mut().for_each(|v| *v /= sc);
                }
                out
            })
            .collect();
        Ok(ObservationSet {
            sequences,
            channel_scales: self
                .channel_scales
                .iter()
                .zip(&scales)
                .map(|(a, b)| a * b)
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    /// Undoes every rescaling applied so far.
    pub fn unscale(&self) -> ObservationSet {
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let mut out = s.clone();
                for (c, sc) in self.channel_scales.iter().enumerate() {
                    out.column_mut(c).iter_mut().for_each(|v| *v *= sc);
                }
                out
            })
            .collect();
        ObservationSet {
            sequences,
            channel_scales: vec![1.0; self.dim()],
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Every time-invariant variational factor of the model.
///
/// The initial-state pair `(μ_i, σ_i)` and the emission pair `(h_id, ρ_id)`
/// are Normal-Gamma: `mu_prec` is the precision scale multiplying `σ`, and
/// `h_cov` is the covariance scale divided by `ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub stick_u: Vec<f64>,
    pub stick_v: Vec<f64>,
    pub init_u: Vec<f64>,
    pub init_v: Vec<f64>,
    /// `K × (K-1)` transition sticks.
    pub trans_u: Vec<Vec<f64>>,
    pub trans_v: Vec<Vec<f64>>,
    /// `phi[i][i'][k]`: probability that stick `i'` of row `i` points at mode `k`.
    pub phi: Vec<Vec<Vec<f64>>>,
    pub mu_mean: Vec<DVector<f64>>,
    pub mu_prec: Vec<DVector<f64>>,
    pub sigma_a: Vec<DVector<f64>>,
    pub sigma_b: Vec<DVector<f64>>,
    /// Rows are the dynamics rows `f_id`.
    pub f_mean: Vec<DMatrix<f64>>,
    /// Covariance shared by every row of `F_i`.
    pub f_cov: Vec<DMatrix<f64>>,
    pub rho_a: Vec<DVector<f64>>,
    pub rho_b: Vec<DVector<f64>>,
    /// `d_z × d_x`, rows are `h_id`.
    pub h_mean: Vec<DMatrix<f64>>,
    pub h_cov: Vec<DMatrix<f64>>,
    pub alpha_point: f64,
    pub kappa_point: f64,
    /// Gamma posterior on `α + κ` and Beta posterior on `κ / (α + κ)`.
    pub conc_a: f64,
    pub conc_b: f64,
    pub conc_u: f64,
    pub conc_v: f64,
}

impl VariationalPosterior {
    pub fn k(&self) -> usize {
        self.phi.len()
    }

    pub fn dim_x(&self) -> usize {
        self.f_mean[0].nrows()
    }

    pub fn dim_z(&self) -> usize {
        self.h_mean[0].nrows()
    }

    /// Checks that every slice of `phi` is a probability vector.
    pub fn phi_is_normalized(&self, tol: f64) -> bool {
        self.phi.iter().flatten().all(|row| {
            row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Validates the hyperparameters against the observations they will be fit to.
pub fn validate_config(hp: &Hyperparameters, obs: &ObservationSet) -> Result<()> {
    hp.validate()?;
    if obs.dim() != hp.dim_z {
        return Err(Error::DimensionMismatch(format!(
            "observations have {} channels but dim_z = {}",
            obs.dim(),
            hp.dim_z
        )));
    }
    Ok(())
}

/// Mode-parameter block of mode `i` at its prior value.
pub(crate) fn reset_mode_to_prior(post: &mut VariationalPosterior, hp: &Hyperparameters, i: usize) {
    let dx = hp.dim_x;
    let dz = hp.dim_z;
    post.mu_mean[i] = DVector::zeros(dx);
    post.mu_prec[i] = DVector::from_element(dx, hp.b_mu[i]);
    post.sigma_a[i] = DVector::from_element(dx, hp.a_sigma[i]);
    post.sigma_b[i] = DVector::from_row_slice(&hp.b_sigma[i]);
    post.f_mean[i] = DMatrix::zeros(dx, dx);
    post.f_cov[i] = DMatrix::from_diagonal(&DVector::from_iterator(
        dx,
        hp.zeta[i].iter().map(|z| 1.0 / z),
    ));
    post.rho_a[i] = DVector::from_element(dz, hp.a_obs[i]);
    post.rho_b[i] = DVector::from_element(dz, hp.b_obs[i]);
    post.h_mean[i] = DMatrix::zeros(dz, dx);
    post.h_cov[i] = DMatrix::from_diagonal(&DVector::from_iterator(
        dx,
        hp.eta[i].iter().map(|e| 1.0 / e),
    ));
}

/// The posterior at the prior: every factor set to its initial value.
pub fn init_posterior(hp: &Hyperparameters) -> VariationalPosterior {
    let k = hp.trunc_k;
    let stick_u = vec![1.0; k - 1];
    let stick_v = vec![hp.gamma; k - 1];
    let sticks = hdp::StickExpectations::compute(&stick_u, &stick_v);
    let phi = hdp::prior_phi(hp.alpha, hp.kappa, &sticks.e_beta);
    let mut post = VariationalPosterior {
        stick_u,
        stick_v,
        init_u: vec![1.0; k - 1],
        init_v: vec![hp.alpha0; k - 1],
        trans_u: vec![vec![1.0; k - 1]; k],
        trans_v: vec![vec![hp.alpha + hp.kappa; k - 1]; k],
        phi,
        mu_mean: Vec::new(),
        mu_prec: Vec::new(),
        sigma_a: Vec::new(),
        sigma_b: Vec::new(),
        f_mean: Vec::new(),
        f_cov: Vec::new(),
        rho_a: Vec::new(),
        rho_b: Vec::new(),
        h_mean: Vec::new(),
        h_cov: Vec::new(),
        alpha_point: hp.alpha,
        kappa_point: hp.kappa,
        conc_a: hp.a_alpha_prior,
        conc_b: hp.b_alpha_prior,
        conc_u: hp.u_kappa_prior,
        conc_v: hp.v_kappa_prior,
    };
    let dx = hp.dim_x;
    let dz = hp.dim_z;
    for _ in 0..k {
        post.mu_mean.push(DVector::zeros(dx));
        post.mu_prec.push(DVector::zeros(dx));
        post.sigma_a.push(DVector::zeros(dx));
        post.sigma_b.push(DVector::zeros(dx));
        post.f_mean.push(DMatrix::zeros(dx, dx));
        post.f_cov.push(DMatrix::zeros(dx, dx));
        post.rho_a.push(DVector::zeros(dz));
        post.rho_b.push(DVector::zeros(dz));
        post.h_mean.push(DMatrix::zeros(dz, dx));
        post.h_cov.push(DMatrix::zeros(dx, dx));
    }
    for i in 0..k {
        reset_mode_to_prior(&mut post, hp, i);
    }
    post
}
