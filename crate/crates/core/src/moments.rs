//! Per-mode expectations of the parameter posteriors, and the quadratic-form
//! expectations built from them.

use nalgebra::{DMatrix, DVector};

use crate::dist::gamma_ln_mean;
use crate::linalg::frob;
use crate::model::VariationalPosterior;

/// Expectations of `Θ_i` under its posterior that the smoother, the chain and
/// the bound need.
#[derive(Debug, Clone)]
pub struct ModeExpectations {
    /// `E[σ_d]`, the diagonal of `E[Σ_i⁻¹]`.
    pub sigma_inv: DVector<f64>,
    /// `E[Σ_i⁻¹ μ_i]`.
    pub sigma_inv_mu: DVector<f64>,
    pub mu_mean: DVector<f64>,
    /// `Σ_d 1/λ_d`: the extra term of `E[(x - μ)ᵀ Σ⁻¹ (x - μ)]`.
    pub mu_var_trace: f64,
    /// `E[ln |Σ_i⁻¹|]`.
    pub ln_det_sigma_inv: f64,
    pub f: DMatrix<f64>,
    pub ftf: DMatrix<f64>,
    /// `E[ρ_d]`, the diagonal of `E[R_i⁻¹]`.
    pub rho: DVector<f64>,
    /// `E[R_i⁻¹ H_i]`.
    pub rinv_h: DMatrix<f64>,
    /// `E[H_iᵀ R_i⁻¹ H_i]`.
    pub htrh: DMatrix<f64>,
    /// `E[ln |R_i⁻¹|]`.
    pub ln_det_rinv: f64,
}

impl ModeExpectations {
    pub fn from_posterior(post: &VariationalPosterior) -> Vec<ModeExpectations> {
        (0..post.k()).map(|i| Self::mode(post, i)).collect()
    }

    fn mode(post: &VariationalPosterior, i: usize) -> ModeExpectations {
        let dx = post.dim_x();
        let dz = post.dim_z();
        let sigma_inv = post.sigma_a[i].component_div(&post.sigma_b[i]);
        let ln_det_sigma_inv = (0..dx)
            .map(|d| gamma_ln_mean(post.sigma_a[i][d], post.sigma_b[i][d]))
            .sum();
        let sigma_inv_mu = sigma_inv.component_mul(&post.mu_mean[i]);
        let mu_var_trace = post.mu_prec[i].iter().map(|l| 1.0 / l).sum();
        let f = post.f_mean[i].clone();
        let ftf = f.transpose() * &f + &post.f_cov[i] * dx as f64;
        let rho = post.rho_a[i].component_div(&post.rho_b[i]);
        let ln_det_rinv = (0..dz)
            .map(|d| gamma_ln_mean(post.rho_a[i][d], post.rho_b[i][d]))
            .sum();
        let mut rinv_h = post.h_mean[i].clone();
        for (d, mut row) in rinv_h.row_iter_mut().enumerate() {
            row *= rho[d];
        }
        let htrh = post.h_mean[i].transpose() * &rinv_h + &post.h_cov[i] * dz as f64;
        ModeExpectations {
            sigma_inv,
            sigma_inv_mu,
            mu_mean: post.mu_mean[i].clone(),
            mu_var_trace,
            ln_det_sigma_inv,
            f,
            ftf,
            rho,
            rinv_h,
            htrh,
            ln_det_rinv,
        }
    }

    /// `Σ_n E[(x_1ⁿ - μ)ᵀ Σ⁻¹ (x_1ⁿ - μ)]` from `Σ_n E[x]`, `Σ_n E[x xᵀ]` and `N`.
    pub fn init_quad(&self, sum_x: &DVector<f64>, sum_xx: &DMatrix<f64>, n: f64) -> f64 {
        let mut q = n * self.mu_var_trace;
        for d in 0..sum_x.len() {
            let m = self.mu_mean[d];
            q += self.sigma_inv[d] * (sum_xx[(d, d)] - 2.0 * m * sum_x[d] + n * m * m);
        }
        q
    }

    /// `Σ_n E[|x_tⁿ - F x_{t-1}ⁿ|²]` from the current second moment, the
    /// cross moment `E[x_t x_{t-1}ᵀ]` and the previous second moment.
    pub fn trans_quad(
        &self,
        sum_xx: &DMatrix<f64>,
        sum_cross: &DMatrix<f64>,
        sum_xx_prev: &DMatrix<f64>,
    ) -> f64 {
        sum_xx.trace() - 2.0 * frob(&self.f, sum_cross) + frob(&self.ftf, sum_xx_prev)
    }

    /// `Σ_n E[(zⁿ - H xⁿ)ᵀ R⁻¹ (zⁿ - H xⁿ)]` from `Σ_n z_d²`, `Σ_n z E[x]ᵀ`
    /// and `Σ_n E[x xᵀ]`.
    pub fn obs_quad(
        &self,
        sum_zz: &DVector<f64>,
        sum_zx: &DMatrix<f64>,
        sum_xx: &DMatrix<f64>,
    ) -> f64 {
        self.rho.dot(sum_zz) - 2.0 * frob(&self.rinv_h, sum_zx) + frob(&self.htrh, sum_xx)
    }
}
