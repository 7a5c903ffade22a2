//! Convergence diagnostics for EIGA: the iteration matrix of the θ-recursion
//! at the ν fixed point, its spectrum, fixed-point residuals, and the
//! large-`N` probe comparing the fixed point against the MMSE estimate.
//!
//! At a fixed `ν*` the θ-recursion is affine, `θ ← B̃ θ + b`, with
//!
//! ```text
//! B̃ = d B + (1 − d) I,   B = P (N I − A^H A) Q,
//! P = (N−1)/N · (I − Λ*/β*)⁻¹,   Q = Λ*/β*
//! ```
//!
//! `P` and `Q` are positive diagonal, so `B` is similar to the Hermitian
//! matrix `(PQ)^{1/2} (N I − A^H A) (PQ)^{1/2}` and has a real spectrum.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eiga::{virtual_noise, EigaResult};
use crate::error::{invalid, Result};
use crate::iga::write_rows;
use crate::iga::{belief_of, IgaState};
use crate::linalg::{general_eigenvalues, hermitian_eigenvalues, norm_inf, norm_inf_real, real_diag, relative_error};
use crate::model::{build_prior, generate_power_spec, observe, sample_channel, Observation, PriorModel};
use crate::operator::{centered_gram, spectral_radius_centered, DenseOperator, LinearOperator, SpectralMethod};
use crate::oracle::{condition_gaussian, eiga_fixed_point_mu, lambda_beta, mmse, solve_nu_fixed_point};

/// Largest `M` for which the iteration matrix is formed.
pub const ITERATION_MATRIX_GUARD: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMatrix {
    /// `B̃*`
    pub matrix: DMatrix<Complex64>,
    pub damping: f64,
    /// Diagonal of `P`.
    pub p: Vec<f64>,
    /// Diagonal of `Q`.
    pub q: Vec<f64>,
    /// `N I − A^H A`
    pub centered: DMatrix<Complex64>,
    pub n_obs: usize,
}

pub fn iteration_matrix<O: LinearOperator + ?Sized>(op: &O, prior: &PriorModel, nu_star: &[f64], damping: f64) -> Result<IterationMatrix> {
    if op.n_cols() > ITERATION_MATRIX_GUARD {
        return Err(invalid!("iteration matrix limited to M <= {ITERATION_MATRIX_GUARD}, got {}", op.n_cols()));
    }
    if op.n_cols() != prior.dim {
        return Err(invalid!("operator has {} columns, prior has {} variables", op.n_cols(), prior.dim));
    }
    let (lambda, beta) = lambda_beta(prior, nu_star)?;
    let n = op.n_rows();
    let nf = n as f64;
    let p: Vec<f64> = lambda.iter().map(|l| (nf - 1.0) / nf / (1.0 - l / beta)).collect();
    let q: Vec<f64> = lambda.iter().map(|l| l / beta).collect();
    let centered = centered_gram(op);
    let mut matrix = (real_diag(&p) * &centered * real_diag(&q)).scale(damping);
    for i in 0..prior.dim {
        matrix[(i, i)] += Complex64::new(1.0 - damping, 0.0);
    }
    Ok(IterationMatrix { matrix, damping, p, q, centered, n_obs: n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSpectrum {
    /// Eigenvalues of `B`, ascending.
    pub eig_b: Vec<f64>,
    /// Eigenvalues of `B̃ = d B + (1 − d) I`, ascending.
    pub eig_btilde: Vec<f64>,
    /// Largest imaginary part from a direct non-Hermitian eigensolve of `B̃`.
    pub max_imag: f64,
}

impl IterationSpectrum {
    pub fn spectral_radius(&self) -> f64 {
        self.eig_btilde.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Spectrum via the Hermitian similarity, cross-checked by a complex Schur
/// decomposition of `B̃` itself.
pub fn eigs_of_iteration_matrix(it: &IterationMatrix) -> Result<IterationSpectrum> {
    let k: Vec<f64> = it.p.iter().zip(&it.q).map(|(p, q)| (p * q).sqrt()).collect();
    let kd = real_diag(&k);
    let mut sym = &kd * &it.centered * &kd;
    // remove rounding asymmetry before the Hermitian solve
    sym = (&sym + sym.adjoint()).scale(0.5);
    let eig_b = hermitian_eigenvalues(sym)?;
    let d = it.damping;
    let eig_btilde = eig_b.iter().map(|l| d * l + 1.0 - d).collect();
    let max_imag = general_eigenvalues(it.matrix.clone())?.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    Ok(IterationSpectrum { eig_b, eig_btilde, max_imag })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rho_centered: f64,
    pub damping: f64,
    pub damping_bound_general: f64,
    pub eig_b_min: f64,
    pub eig_b_max: f64,
    /// Spectral radius of `B̃*`.
    pub eig_btilde_max: f64,
    pub max_imag_part: f64,
    pub predicted_convergent: bool,
}

pub fn convergence_report<O: LinearOperator + ?Sized>(op: &O, prior: &PriorModel, nu_star: &[f64], damping: f64) -> Result<ConvergenceReport> {
    let it = iteration_matrix(op, prior, nu_star, damping)?;
    let spec = eigs_of_iteration_matrix(&it)?;
    let rho = spectral_radius_centered(op, SpectralMethod::Exact)?;
    let radius = spec.spectral_radius();
    Ok(ConvergenceReport {
        rho_centered: rho,
        damping,
        damping_bound_general: 2.0 / (1.0 + rho / op.n_rows() as f64),
        eig_b_min: spec.eig_b[0],
        eig_b_max: *spec.eig_b.last().unwrap(),
        eig_btilde_max: radius,
        max_imag_part: spec.max_imag,
        predicted_convergent: radius < 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResiduals {
    /// `‖ϑ_0 − N/(N−1) ϑ‖_∞`
    pub e_condition: f64,
    /// `‖μ_0 − (1/N) Σ_n μ_n‖_∞ / (1 + ‖μ_0‖_∞)`
    pub m_condition_mean: f64,
    /// `max_n ‖diag Σ_0 − diag Σ_n‖_∞`
    pub m_condition_var: f64,
}

/// Fixed-point conditions of an EIGA result. `μ_n, Σ_n` are the moments of the
/// auxiliary Gaussian of observation `n` built from the common parameter with
/// the virtual noise variance.
pub fn fixed_point_residuals<O: LinearOperator + ?Sized>(result: &EigaResult, op: &O, y: &[Complex64], prior: &PriorModel) -> Result<FixedPointResiduals> {
    let n = op.n_rows();
    let m = prior.dim;
    if y.len() != n || op.n_cols() != m || result.common_np.dim() != m {
        return Err(invalid!("dimension mismatch in residual computation"));
    }
    let scale = n as f64 / (n as f64 - 1.0);
    let common = &result.common_np;
    let expected = common.scaled(scale);
    let e_condition = result.objective_np.max_abs_diff(&expected);

    let lambda: Vec<f64> = prior.variances.iter().zip(&common.nu).map(|(d, nu)| 1.0 / (1.0 / d - nu)).collect();
    let lt: Vec<Complex64> = lambda.iter().zip(&common.theta).map(|(l, t)| t * *l).collect();
    let rows: Vec<Vec<Complex64>> = (0..n).map(|k| op.row(k)).collect::<Result<_>>()?;

    let (mean_sum, var_gap) = rows
        .par_iter()
        .zip(y.par_iter())
        .map(|(gamma, &yn)| {
            let beta = prior.virtual_noise_var + gamma.iter().zip(&lambda).map(|(g, l)| g.norm_sqr() * l).sum::<f64>();
            let c: Complex64 = gamma.iter().zip(&lt).map(|(g, v)| g.conj() * v).sum();
            let r = (yn * 2.0 - c) / (2.0 * beta);
            let mean: Vec<Complex64> = (0..m).map(|i| lt[i] * 0.5 + gamma[i] * lambda[i] * r).collect();
            let gap = (0..m).map(|i| (result.belief.var[i] - (lambda[i] - lambda[i] * lambda[i] * gamma[i].norm_sqr() / beta)).abs()).fold(0.0, f64::max);
            (mean, gap)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((vec![Complex64::new(0.0, 0.0); m], 0.0f64), |(mut acc, g), (mean, gap)| {
            acc.iter_mut().zip(&mean).for_each(|(a, b)| *a += b);
            (acc, g.max(gap))
        });
    let avg: Vec<Complex64> = mean_sum.iter().map(|v| v / n as f64).collect();
    let diff: Vec<Complex64> = result.belief.mean.iter().zip(&avg).map(|(a, b)| a - b).collect();
    Ok(FixedPointResiduals { e_condition, m_condition_mean: norm_inf(&diff) / (1.0 + norm_inf(&result.belief.mean)), m_condition_var: var_gap })
}

/// Fixed-point conditions of an IGA state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgaFixedPointResiduals {
    /// `‖ϑ_0 − (1/(N−1)) Σ_n ϑ_n‖_∞`
    pub e_condition: f64,
    /// `max_n ‖μ_0 − μ_n‖_∞ / (1 + ‖μ_0‖_∞)`
    pub m_condition_mean: f64,
    /// `max_n ‖diag Σ_0 − diag Σ_n‖_∞`
    pub m_condition_var: f64,
}

/// Fixed-point conditions of an IGA state. The moments `μ_n, Σ_n` of each
/// auxiliary point are computed by exact dense conditioning, independently of
/// the projection formulas used by the iteration.
pub fn iga_fixed_point_residuals<O: LinearOperator + ?Sized>(
    state: &IgaState,
    op: &O,
    obs: &Observation,
    prior: &PriorModel,
) -> Result<IgaFixedPointResiduals> {
    let n = op.n_rows();
    if n < 2 || state.per_obs.len() != n || obs.y.len() != n || op.n_cols() != prior.dim {
        return Err(invalid!("dimension mismatch in residual computation"));
    }
    let mut sum = state.per_obs[0].clone();
    for p in &state.per_obs[1..] {
        sum = sum.combine(1.0, p, 1.0);
    }
    let e_condition = state.objective.max_abs_diff(&sum.scaled(1.0 / (n as f64 - 1.0)));

    let objective = belief_of(&state.objective, prior)?;
    let scale = 1.0 + norm_inf(&objective.mean);
    let gaps = (0..n)
        .into_par_iter()
        .map(|k| {
            let aux = condition_gaussian(prior, &op.row(k)?, obs.y[k], &state.per_obs[k])?;
            let dm: Vec<Complex64> = aux.mean.iter().zip(&objective.mean).map(|(a, b)| a - b).collect();
            let dv: Vec<f64> = aux.var.iter().zip(&objective.var).map(|(a, b)| a - b).collect();
            Ok((norm_inf(&dm) / scale, norm_inf_real(&dv)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (m_condition_mean, m_condition_var) = gaps.into_iter().fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(x), b.max(y)));
    Ok(IgaFixedPointResiduals { e_condition, m_condition_mean, m_condition_var })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// `(M, N)` pairs, each with `M < N`.
    pub sizes: Vec<(usize, usize)>,
    pub noise_var: f64,
    pub seeds: Vec<u64>,
    /// Use the calibrated virtual noise `f(σ²)`; otherwise `σ̃² = σ²`.
    pub calibrate: bool,
    pub tol: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub m: usize,
    pub n: usize,
    pub mean_rel_error: f64,
    pub max_lambda: f64,
    pub lambda_bound: f64,
    pub f_beta_gap: f64,
}

struct ProbeCell {
    rel_error: f64,
    max_lambda: f64,
    lambda_bound: f64,
    f_beta_gap: f64,
}

fn probe_cell(m: usize, n: usize, noise_var: f64, calibrate: bool, tol: f64, seed: u64) -> Result<ProbeCell> {
    let spec = generate_power_spec(m, 1, m, seed)?;
    let (prior, _) = build_prior(&spec, noise_var, n, calibrate)?;
    let op = DenseOperator::random_unit_modulus(n, m, seed);
    let h = sample_channel(&prior, seed);
    let obs = observe(&op, &h, noise_var, seed)?;
    let reference = mmse(&op, &prior, &obs.y)?;
    let nu = solve_nu_fixed_point(&prior, n, tol)?;
    let mu = eiga_fixed_point_mu(&op, &prior, &obs.y, &nu)?;
    let (lambda, beta) = lambda_beta(&prior, &nu)?;
    Ok(ProbeCell {
        rel_error: relative_error(&mu, &reference.mean),
        max_lambda: norm_inf_real(&lambda),
        lambda_bound: (prior.virtual_noise_var + prior.trace()) / (n as f64 - 1.0),
        f_beta_gap: (virtual_noise(beta, &prior.variances, n)? - prior.virtual_noise_var).abs(),
    })
}

/// For each size, averages over seeds: the relative distance between the
/// closed-form EIGA fixed-point mean and the MMSE mean, `max_i Λ*_ii`, and
/// `|f(β*) − σ̃²|`. Priors are full-support log-uniform profiles, operators
/// random unit-modulus matrices. Cells run in parallel; averages are summed
/// in seed order.
pub fn theorem9_probe(config: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    if config.seeds.is_empty() || config.sizes.is_empty() {
        return Err(invalid!("probe needs at least one size and one seed"));
    }
    if let Some(&(m, n)) = config.sizes.iter().find(|&&(m, n)| m == 0 || m >= n) {
        return Err(invalid!("probe sizes need 0 < M < N, got ({m}, {n})"));
    }
    let cells: Vec<(usize, u64)> = (0..config.sizes.len()).flat_map(|s| config.seeds.iter().map(move |&seed| (s, seed))).collect();
    let results = cells
        .par_iter()
        .map(|&(s, seed)| {
            let (m, n) = config.sizes[s];
            probe_cell(m, n, config.noise_var, config.calibrate, config.tol, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = config.seeds.len();
    Ok(config
        .sizes
        .iter()
        .zip(results.chunks(k))
        .map(|(&(m, n), chunk)| {
            let mean = |f: fn(&ProbeCell) -> f64| chunk.iter().map(f).sum::<f64>() / k as f64;
            ProbeRow {
                m,
                n,
                mean_rel_error: mean(|c| c.rel_error),
                max_lambda: mean(|c| c.max_lambda),
                lambda_bound: mean(|c| c.lambda_bound),
                f_beta_gap: mean(|c| c.f_beta_gap),
            }
        })
        .collect())
}

pub fn write_probe_csv(rows: &[ProbeRow], w: impl Write) -> Result<()> {
    write_rows(rows, w)
}
