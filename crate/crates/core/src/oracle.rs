//! Dense ground-truth computations used to certify the matrix-free solvers.
//! Every routine materializes `A` and is limited to `M ≤ 4096`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::iga::{GaussianBelief, NaturalParameter};
use crate::linalg::{cholesky_with_estimate, real_diag};
use crate::model::PriorModel;
use crate::operator::{LinearOperator, DENSE_GUARD};

/// Condition estimates above this attach a warning to the result.
pub const CONDITION_WARNING: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorExact {
    pub mean: Vec<Complex64>,
    pub cov_diag: Vec<f64>,
    pub full_cov_available: bool,
    /// Lower bound on the condition number of the posterior precision.
    pub condition_estimate: f64,
    pub warning: Option<String>,
}

fn guard<O: LinearOperator + ?Sized>(op: &O, prior: &PriorModel) -> Result<()> {
    if op.n_cols() > DENSE_GUARD {
        return Err(invalid!("dense oracle limited to M <= {DENSE_GUARD}, got {}", op.n_cols()));
    }
    if op.n_cols() != prior.dim {
        return Err(invalid!("operator has {} columns, prior has {} variables", op.n_cols(), prior.dim));
    }
    Ok(())
}

/// Exact posterior of `h ~ CN(0, D)` given `y = A h + z`, `z ~ CN(0, σ² I)`:
/// precision `D⁻¹ + A^H A/σ²`, mean `(D⁻¹ + A^H A/σ²)⁻¹ A^H y/σ²`, solved by
/// Cholesky factorization.
pub fn mmse<O: LinearOperator + ?Sized>(op: &O, prior: &PriorModel, y: &[Complex64]) -> Result<PosteriorExact> {
    guard(op, prior)?;
    if y.len() != op.n_rows() {
        return Err(invalid!("observation has length {}, operator has {} rows", y.len(), op.n_rows()));
    }
    let a = op.materialize();
    let s2 = prior.noise_var;
    let inv_d: Vec<f64> = prior.variances.iter().map(|d| 1.0 / d).collect();
    let precision = a.ad_mul(&a).unscale(s2) + real_diag(&inv_d);
    let rhs = a.ad_mul(&DVector::from_column_slice(y)).unscale(s2);
    let (chol, condition_estimate) = cholesky_with_estimate(precision)?;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    let warning = (condition_estimate > CONDITION_WARNING).then(|| {
        let msg = format!("posterior precision is ill-conditioned (estimate {condition_estimate:e})");
        warn!("{msg}");
        msg
    });
    Ok(PosteriorExact {
        mean: mean.as_slice().to_vec(),
        cov_diag: cov.diagonal().iter().map(|v| v.re).collect(),
        full_cov_available: true,
        condition_estimate,
        warning,
    })
}

/// `Λ* = (D⁻¹ − Diag ν*)⁻¹` and `β* = σ̃² + tr Λ*` for a strictly negative `ν*`.
pub fn lambda_beta(prior: &PriorModel, nu_star: &[f64]) -> Result<(Vec<f64>, f64)> {
    if nu_star.len() != prior.dim {
        return Err(invalid!("nu has length {}, expected {}", nu_star.len(), prior.dim));
    }
    if let Some(v) = nu_star.iter().find(|&&v| !(v < 0.0)) {
        return Err(invalid!("fixed-point nu must be strictly negative, got {v}"));
    }
    let lambda: Vec<f64> = prior.variances.iter().zip(nu_star).map(|(d, nu)| 1.0 / (1.0 / d - nu)).collect();
    let beta = prior.virtual_noise_var + lambda.iter().sum::<f64>();
    Ok((lambda, beta))
}

/// Closed-form EIGA fixed-point mean
/// `μ_0* = D [A^H A (D − Λ*/N) + β* I]⁻¹ A^H y`, with `ν*` the fixed point of
/// the common second-order parameter.
pub fn eiga_fixed_point_mu<O: LinearOperator + ?Sized>(op: &O, prior: &PriorModel, y: &[Complex64], nu_star: &[f64]) -> Result<Vec<Complex64>> {
    guard(op, prior)?;
    if y.len() != op.n_rows() {
        return Err(invalid!("observation has length {}, operator has {} rows", y.len(), op.n_rows()));
    }
    let (lambda, beta) = lambda_beta(prior, nu_star)?;
    let n = op.n_rows() as f64;
    let a = op.materialize();
    let shifted: Vec<f64> = prior.variances.iter().zip(&lambda).map(|(d, l)| d - l / n).collect();
    let mut system = a.ad_mul(&a) * real_diag(&shifted);
    for i in 0..prior.dim {
        system[(i, i)] += beta;
    }
    let rhs = a.ad_mul(&DVector::from_column_slice(y));
    let x = system.lu().solve(&rhs).ok_or_else(|| Error::Numerical("fixed-point system is singular".into()))?;
    Ok(x.iter().zip(&prior.variances).map(|(v, d)| v * *d).collect())
}

pub const NU_SOLVER_MAX_ITER: usize = 1_000_000;

/// Fixed point of the undamped second-order recursion
/// `ν ← (1 − N)/(σ̃² + Σ_j Λ_j − Λ_i)` from `ν = 0`. The sequence decreases
/// monotonically; iteration stops when the change is at most `tol·(1 + ‖ν‖_∞)`.
pub fn solve_nu_fixed_point(prior: &PriorModel, n_obs: usize, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(invalid!("tolerance must be positive"));
    }
    if n_obs < 2 {
        return Err(invalid!("need at least two observations"));
    }
    let g = |nu: &[f64]| -> Vec<f64> {
        let lambda: Vec<f64> = prior.variances.iter().zip(nu).map(|(d, v)| d / (1.0 - d * v)).collect();
        let beta = prior.virtual_noise_var + lambda.iter().sum::<f64>();
        lambda.iter().map(|l| (1.0 - n_obs as f64) / (beta - l)).collect()
    };
    let mut nu = vec![0.0; prior.dim];
    for _ in 0..NU_SOLVER_MAX_ITER {
        let next = g(&nu);
        let change = next.iter().zip(&nu).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = 1.0 + next.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        nu = next;
        if change <= tol * scale {
            return Ok(nu);
        }
    }
    Err(Error::NonConvergence { iterations: NU_SOLVER_MAX_ITER, last_estimate: nu.iter().copied().fold(0.0, f64::min) })
}

/// Exact mean and marginal variances of the Gaussian with precision
/// `D⁻¹ − Diag ν_n + γγ^H/σ²` and first-order term `θ_n + 2γ y_n/σ²`,
/// by dense Cholesky factorization.
pub fn condition_gaussian(prior: &PriorModel, gamma_n: &[Complex64], y_n: Complex64, np_n: &NaturalParameter) -> Result<GaussianBelief> {
    let m = prior.dim;
    if gamma_n.len() != m || np_n.dim() != m {
        return Err(invalid!("dimension mismatch in conditioning"));
    }
    let s2 = prior.noise_var;
    let g = DVector::from_column_slice(gamma_n);
    let base: Vec<f64> = prior.variances.iter().zip(&np_n.nu).map(|(d, nu)| 1.0 / d - nu).collect();
    let precision: DMatrix<Complex64> = real_diag(&base) + (&g * g.adjoint()).unscale(s2);
    let linear = DVector::from_column_slice(&np_n.theta) + g.scale(2.0 / s2) * y_n;
    let (chol, _) = cholesky_with_estimate(precision)?;
    let mean = chol.solve(&linear).scale(0.5);
    let cov = chol.inverse();
    Ok(GaussianBelief { mean: mean.as_slice().to_vec(), var: cov.diagonal().iter().map(|v| v.re).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iga::{belief_of, m_project};
    use crate::operator::DenseOperator;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn scalar_posterior() {
        let op = DenseOperator::new(DMatrix::from_element(1, 1, c(1.0, 0.0))).unwrap();
        let prior = PriorModel::uncalibrated(vec![1.0], 1.0).unwrap();
        let post = mmse(&op, &prior, &[c(2.0, 0.0)]).unwrap();
        assert!((post.mean[0] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((post.cov_diag[0] - 0.5).abs() < 1e-15);
        assert!(post.warning.is_none());
    }

    #[test]
    fn uninformative_limit() {
        let op = DenseOperator::random_unit_modulus(5, 3, 1);
        let prior = PriorModel::uncalibrated(vec![1.0, 2.0, 3.0], 1e12).unwrap();
        let post = mmse(&op, &prior, &[c(1.0, -1.0); 5]).unwrap();
        assert!(post.mean.iter().all(|v| v.norm() < 1e-6));
        for (v, d) in post.cov_diag.iter().zip(&prior.variances) {
            assert!((v - d).abs() < 1e-6);
        }
    }

    #[test]
    fn normal_equation_residual() {
        let op = DenseOperator::random_unit_modulus(32, 8, 4);
        let prior = PriorModel::uncalibrated((1..=8).map(|i| i as f64 / 4.0).collect(), 0.2).unwrap();
        let h = crate::model::sample_channel(&prior, 3);
        let y = crate::model::observe(&op, &h, prior.noise_var, 5).unwrap().y;
        let post = mmse(&op, &prior, &y).unwrap();
        let a = op.materialize();
        let inv_d: Vec<f64> = prior.variances.iter().map(|d| 1.0 / d).collect();
        let p = real_diag(&inv_d) + a.ad_mul(&a).unscale(prior.noise_var);
        let r = p * DVector::from_column_slice(&post.mean) - a.ad_mul(&DVector::from_column_slice(&y)).unscale(prior.noise_var);
        assert!(r.norm() <= 1e-10, "{}", r.norm());
    }

    #[test]
    fn nu_fixed_point_examples() {
        let prior = PriorModel::uncalibrated(vec![1.0, 1.0], 1.0).unwrap();
        let nu = solve_nu_fixed_point(&prior, 3, 1e-14).unwrap();
        assert!(nu.iter().all(|v| (v + 2f64.sqrt()).abs() < 1e-9));
        // with a single variable β − Λ = σ̃², so the recursion is constant
        let prior = PriorModel::uncalibrated(vec![1.0], 1.0).unwrap();
        assert_eq!(solve_nu_fixed_point(&prior, 2, 1e-14).unwrap(), vec![-1.0]);
        assert!(solve_nu_fixed_point(&prior, 2, 0.0).is_err());
    }

    #[test]
    fn fixed_point_mean_rejects_nonnegative_nu_and_maps_zero() {
        let op = DenseOperator::random_unit_modulus(4, 2, 1);
        let prior = PriorModel::uncalibrated(vec![1.0, 1.0], 1.0).unwrap();
        assert!(eiga_fixed_point_mu(&op, &prior, &[c(0.0, 0.0); 4], &[0.0, -1.0]).is_err());
        let mu = eiga_fixed_point_mu(&op, &prior, &[c(0.0, 0.0); 4], &[-1.0, -1.0]).unwrap();
        assert!(mu.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn conditioning_matches_projection() {
        let prior = PriorModel::uncalibrated(vec![1.0], 1.0).unwrap();
        let np = NaturalParameter::zeros(1);
        let exact = condition_gaussian(&prior, &[c(1.0, 0.0)], c(1.0, 0.0), &np).unwrap();
        let proj = belief_of(&m_project(&np, &[c(1.0, 0.0)], c(1.0, 0.0), &prior).unwrap(), &prior).unwrap();
        assert!((exact.mean[0] - proj.mean[0]).norm() < 1e-12);
        assert!((exact.var[0] - proj.var[0]).abs() < 1e-12);
        assert!((exact.var[0] - 0.5).abs() < 1e-12);
        // no observation: prior times the factor
        let np = NaturalParameter::new(vec![c(1.0, 2.0)], vec![-0.5]).unwrap();
        let none = condition_gaussian(&prior, &[c(0.0, 0.0)], c(3.0, 0.0), &np).unwrap();
        let direct = belief_of(&np, &prior).unwrap();
        assert!((none.mean[0] - direct.mean[0]).norm() < 1e-15 && (none.var[0] - direct.var[0]).abs() < 1e-15);
        assert!(exact.var[0] <= 1.0);
    }
}
