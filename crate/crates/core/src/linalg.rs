//! Small dense linear-algebra helpers shared by the smoother and the updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter added to the diagonal after every symmetrization of a precision.
pub const SPD_JITTER: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn add_jitter(m: &mut DMatrix<f64>, eps: f64) {
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical(format!("{what} is not positive definite")))?;
    let logdet = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok((inv, logdet))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    spd_inverse_logdet(m, what).map(|(inv, _)| inv)
}

pub fn spd_logdet(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical(format!("{what} is not positive definite")))?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>())
}

/// `tr(A Bᵀ)`, i.e. the Frobenius inner product of two equally shaped matrices.
pub fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn diag_matrix(d: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(d))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Numerically stable `ln Σ exp(x)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
