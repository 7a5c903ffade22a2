//! Efficient information-geometry algorithm (EIGA).
//!
//! All per-observation parameters are replaced by one common parameter
//! `ϑ = (θ, ν)`. With `Λ = (D⁻¹ − Diag ν)⁻¹` and `β = σ̃² + tr Λ` (σ̃² is the
//! virtual noise variance) one iteration is
//!
//! ```text
//! ν ← d (1 − N) diag((β I − Λ)⁻¹) + (1 − d) ν
//! θ ← (2/β) J A^H y − (1/β) J A^H A Λ θ + (N J + (1 − d N)) θ,   J = d (N−1)/N · (I − Λ/β)⁻¹
//! ```
//!
//! which costs one `apply` and one `adjoint_apply` (`A^H y` is computed once).
//! The output natural parameter is `ϑ_0 = N/(N−1) · ϑ`.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::iga::{belief_of, write_rows, GaussianBelief, NaturalParameter};
use crate::linalg::{norm_inf, norm_inf_real};
use crate::model::{Observation, PriorModel};
use crate::operator::{damping_bounds, LinearOperator};

/// Iterates whose largest magnitude exceeds this are treated as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e150;

/// Calibrated virtual noise `f(σ²) = σ² − Σ_i 1/(1/D_i + (N−1)/σ²)`.
///
/// Requires fewer variables than observations, where `f` is increasing and
/// `0 < f(σ²) < σ²`.
pub fn virtual_noise(noise_var: f64, prior_variances: &[f64], n_obs: usize) -> Result<f64> {
    let m = prior_variances.len();
    if m >= n_obs {
        return Err(Error::Unsupported(format!("virtual noise calibration needs M < N, got M = {m}, N = {n_obs}")));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(invalid!("noise variance must be positive, got {noise_var}"));
    }
    let k = (n_obs - 1) as f64 / noise_var;
    let trace: f64 = prior_variances.iter().map(|&d| 1.0 / (1.0 / d + k)).sum();
    Ok(noise_var - trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigaState {
    pub theta: Vec<Complex64>,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub beta: f64,
    pub damping: f64,
    pub t: usize,
}

impl EigaState {
    /// State at `θ = 0` and the given `ν(0)`, which must lie in
    /// `[−(N−1)/σ̃², 0]`.
    pub fn new(prior: &PriorModel, n_obs: usize, damping: f64, nu_init: Option<Vec<f64>>) -> Result<Self> {
        if !(damping > 0.0 && damping <= 1.0) {
            return Err(invalid!("damping {damping} outside (0, 1]"));
        }
        let nu = nu_init.unwrap_or_else(|| vec![0.0; prior.dim]);
        if nu.len() != prior.dim {
            return Err(invalid!("initial nu has length {}, expected {}", nu.len(), prior.dim));
        }
        let lower = -((n_obs as f64) - 1.0) / prior.virtual_noise_var;
        if let Some(v) = nu.iter().find(|&&v| !(lower..=0.0).contains(&v)) {
            return Err(invalid!("initial nu entry {v} outside [{lower}, 0]"));
        }
        let mut state = EigaState { theta: vec![Complex64::new(0.0, 0.0); prior.dim], nu, lambda: Vec::new(), beta: 0.0, damping, t: 0 };
        state.refresh_cache(prior)?;
        Ok(state)
    }

    /// Recomputes `Λ = (D⁻¹ − Diag ν)⁻¹` and `β = σ̃² + tr Λ`.
    pub fn refresh_cache(&mut self, prior: &PriorModel) -> Result<()> {
        self.lambda.clear();
        for (&d, &nu) in prior.variances.iter().zip(&self.nu) {
            let precision = 1.0 / d - nu;
            if !(precision > 0.0) {
                return Err(Error::InvalidState(format!("nonpositive precision {precision}")));
            }
            self.lambda.push(1.0 / precision);
        }
        self.beta = prior.virtual_noise_var + self.lambda.iter().sum::<f64>();
        Ok(())
    }

    pub fn common_np(&self) -> NaturalParameter {
        NaturalParameter { theta: self.theta.clone(), nu: self.nu.clone() }
    }
}

/// `g(ν) = (1 − N) diag((β I − Λ)⁻¹)`, damped.
pub fn update_nu(state: &EigaState, n_obs: usize) -> Vec<f64> {
    let d = state.damping;
    let scale = 1.0 - n_obs as f64;
    state.lambda.iter().zip(&state.nu).map(|(&l, &nu)| d * scale / (state.beta - l) + (1.0 - d) * nu).collect()
}

/// θ-recursion from the cached `Λ, β` and a precomputed `A^H y`. Performs
/// exactly one `apply` and one `adjoint_apply`.
pub fn update_theta<O: LinearOperator + ?Sized>(state: &EigaState, op: &O, adj_y: &[Complex64], n_obs: usize) -> Result<Vec<Complex64>> {
    if adj_y.len() != state.theta.len() || op.n_cols() != state.theta.len() {
        return Err(invalid!("dimension mismatch between state ({}), A^H y ({}) and operator ({})", state.theta.len(), adj_y.len(), op.n_cols()));
    }
    let (d, beta, n) = (state.damping, state.beta, n_obs as f64);
    let scaled: Vec<Complex64> = state.lambda.iter().zip(&state.theta).map(|(l, t)| t * *l).collect();
    let gram = op.adjoint_apply(&op.apply(&scaled)?)?;
    Ok((0..state.theta.len())
        .map(|i| {
            let j = d * (n - 1.0) / n / (1.0 - state.lambda[i] / beta);
            (adj_y[i] * 2.0 - gram[i]) * (j / beta) + state.theta[i] * (n * j + 1.0 - d * n)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigaOptions {
    /// Damping factor; `None` picks 0.9 of the loosest guaranteed bound.
    pub damping: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    /// Initial second-order parameter; zero when `None`.
    pub nu_init: Option<Vec<f64>>,
}

impl Default for EigaOptions {
    fn default() -> Self {
        EigaOptions { damping: None, max_iter: 2000, tol: 1e-8, nu_init: None }
    }
}

impl EigaOptions {
    pub fn with_damping(damping: f64) -> Self {
        EigaOptions { damping: Some(damping), ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigaTraceRow {
    pub t: usize,
    pub theta_residual: f64,
    pub nu_residual: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigaResult {
    /// `ϑ_0 = N/(N−1) · ϑ`
    pub objective_np: NaturalParameter,
    /// Final common parameter `ϑ`.
    pub common_np: NaturalParameter,
    pub belief: GaussianBelief,
    pub damping: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<EigaTraceRow>,
}

impl EigaResult {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_rows(&self.trace, std::io::BufWriter::new(file))
    }
}

/// Largest change relative to the new iterate; zero when nothing moved.
fn relative_change(delta: f64, scale: f64) -> f64 {
    if delta == 0.0 {
        0.0
    } else {
        delta / scale
    }
}

/// EIGA solver bound to one problem instance.
pub struct Eiga<'a, O: LinearOperator + ?Sized> {
    op: &'a O,
    prior: &'a PriorModel,
    adj_y: Vec<Complex64>,
    n_obs: usize,
}

impl<'a, O: LinearOperator + ?Sized> Eiga<'a, O> {
    pub fn new(op: &'a O, obs: &Observation, prior: &'a PriorModel) -> Result<Self> {
        if op.n_cols() != prior.dim {
            return Err(invalid!("operator has {} columns, prior has {} variables", op.n_cols(), prior.dim));
        }
        if obs.y.len() != op.n_rows() {
            return Err(invalid!("observation has length {}, operator has {} rows", obs.y.len(), op.n_rows()));
        }
        if op.n_rows() < 2 {
            return Err(invalid!("need at least two observations"));
        }
        let adj_y = op.adjoint_apply(&obs.y)?;
        Ok(Eiga { op, prior, adj_y, n_obs: op.n_rows() })
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn adj_y(&self) -> &[Complex64] {
        &self.adj_y
    }

    pub fn default_damping(&self) -> Result<f64> {
        Ok(damping_bounds(self.op, None)?.recommended())
    }

    pub fn initial_state(&self, damping: f64, nu_init: Option<Vec<f64>>) -> Result<EigaState> {
        EigaState::new(self.prior, self.n_obs, damping, nu_init)
    }

    /// Both recursions read iteration-`t` quantities; the cache is refreshed
    /// afterwards. Returns `(θ residual, ν residual)`.
    pub fn step(&self, state: &mut EigaState) -> Result<(f64, f64)> {
        let theta = update_theta(state, self.op, &self.adj_y, self.n_obs)?;
        let nu = update_nu(state, self.n_obs);
        let iteration = state.t + 1;
        let finite = theta.iter().all(|v| v.re.is_finite() && v.im.is_finite()) && nu.iter().all(|v| v.is_finite());
        let size = norm_inf(&theta);
        if !finite || size > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence { iteration, detail: format!("first-order parameter reached magnitude {size:e}") });
        }
        let dt = theta.iter().zip(&state.theta).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        let dn = nu.iter().zip(&state.nu).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let residuals = (relative_change(dt, size), relative_change(dn, norm_inf_real(&nu)));
        state.theta = theta;
        state.nu = nu;
        state.t = iteration;
        state.refresh_cache(self.prior).map_err(|e| Error::Divergence { iteration, detail: e.to_string() })?;
        Ok(residuals)
    }

    pub fn finish(&self, state: &EigaState, converged: bool, trace: Vec<EigaTraceRow>) -> Result<EigaResult> {
        let common_np = state.common_np();
        let objective_np = common_np.scaled(self.n_obs as f64 / (self.n_obs as f64 - 1.0));
        let belief = belief_of(&objective_np, self.prior)?;
        Ok(EigaResult { objective_np, common_np, belief, damping: state.damping, iterations: state.t, converged, trace })
    }

    pub fn run(&self, options: &EigaOptions) -> Result<EigaResult> {
        if !(options.tol >= 0.0) {
            return Err(invalid!("tolerance must be nonnegative"));
        }
        let damping = match options.damping {
            Some(d) => d,
            None => self.default_damping()?,
        };
        let mut state = self.initial_state(damping, options.nu_init.clone())?;
        let mut trace = Vec::new();
        let mut converged = false;
        while state.t < options.max_iter {
            let (theta_residual, nu_residual) = self.step(&mut state)?;
            trace.push(EigaTraceRow { t: state.t, theta_residual, nu_residual, beta: state.beta });
            if theta_residual.max(nu_residual) <= options.tol {
                converged = true;
                break;
            }
        }
        self.finish(&state, converged, trace)
    }
}

/// Runs EIGA from `θ = 0` (and `ν = 0` unless overridden).
pub fn eiga_run<O: LinearOperator + ?Sized>(op: &O, obs: &Observation, prior: &PriorModel, options: &EigaOptions) -> Result<EigaResult> {
    Eiga::new(op, obs, prior)?.run(options)
}
