//! Small complex vector and dense-matrix helpers shared by the solvers and
//! oracles.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub const EIGEN_EPS: f64 = 1e-15;
pub const EIGEN_MAX_SWEEPS: usize = 10_000;

pub fn matvec(a: &DMatrix<Complex64>, x: &[Complex64]) -> Vec<Complex64> {
    let y = a * DVector::from_column_slice(x);
    y.as_slice().to_vec()
}

pub fn adjoint_matvec(a: &DMatrix<Complex64>, s: &[Complex64]) -> Vec<Complex64> {
    let y = a.ad_mul(&DVector::from_column_slice(s));
    y.as_slice().to_vec()
}

pub fn norm(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn norm_inf(x: &[Complex64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.norm()))
}

pub fn norm_inf_real(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `⟨a, b⟩ = Σ a_i conj(b_i)`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

/// `‖a - b‖ / ‖b‖` (absolute when `b = 0`).
pub fn relative_error(a: &[Complex64], b: &[Complex64]) -> f64 {
    let d: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nb = norm(b);
    if nb == 0.0 {
        norm(&d)
    } else {
        norm(&d) / nb
    }
}

pub fn real_diag(d: &[f64]) -> DMatrix<Complex64> {
    DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|&v| Complex64::new(v, 0.0))))
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: DMatrix<Complex64>) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::try_new(m, EIGEN_EPS, EIGEN_MAX_SWEEPS).ok_or_else(|| Error::Numerical("Hermitian eigensolver did not converge".into()))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

/// Eigenvalues of a general complex matrix from its complex Schur form.
pub fn general_eigenvalues(m: DMatrix<Complex64>) -> Result<Vec<Complex64>> {
    let schur: Schur<Complex64, Dyn> =
        Schur::try_new(m, EIGEN_EPS, EIGEN_MAX_SWEEPS).ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let (_, t) = schur.unpack();
    Ok(t.diagonal().iter().copied().collect())
}

/// Cholesky factor of a Hermitian positive definite matrix together with a
/// cheap conditioning estimate `(max L_ii / min L_ii)²`, a lower bound on the
/// 2-norm condition number.
pub fn cholesky_with_estimate(m: DMatrix<Complex64>) -> Result<(Cholesky<Complex64, Dyn>, f64)> {
    let chol = Cholesky::new(m).ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    // the complex square root never fails, so check the pivots explicitly
    let pivots = chol.l_dirty().diagonal();
    if pivots.iter().any(|v| !(v.re > 0.0) || v.im.abs() > 1e-12 * v.re) {
        return Err(Error::Numerical("matrix is not positive definite".into()));
    }
    let diag: Vec<f64> = pivots.iter().map(|v| v.re).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((chol, (max / min).powi(2)))
}
