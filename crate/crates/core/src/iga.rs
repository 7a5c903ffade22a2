//! Reference information-geometry algorithm (IGA).
//!
//! Every observation `y_n` carries its own natural parameter `ϑ_n = (θ_n, ν_n)`.
//! Each iteration m-projects the auxiliary Gaussian "prior · ϑ_n · likelihood of
//! y_n" onto the fully factorized family, takes the differences
//! `ξ_n = ϑ_0n − ϑ_n`, and performs the damped updates
//!
//! ```text
//! ϑ_n ← d Σ_{n'≠n} ξ_n' + (1 − d) ϑ_n        ϑ_0 ← d Σ_n ξ_n + (1 − d) ϑ_0
//! ```
//!
//! The cost is `O(N M)` per iteration with dense rows; this module is the
//! semantic reference that the efficient solver is checked against.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Observation, PriorModel};
use crate::operator::LinearOperator;

/// First- and second-order natural parameters `(θ, ν)` of a factorized
/// Gaussian factor `exp(Re(θ^H h) + Σ ν_i |h_i|²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalParameter {
    pub theta: Vec<Complex64>,
    pub nu: Vec<f64>,
}

impl NaturalParameter {
    pub fn new(theta: Vec<Complex64>, nu: Vec<f64>) -> Result<Self> {
        if theta.len() != nu.len() {
            return Err(invalid!("theta has length {}, nu has length {}", theta.len(), nu.len()));
        }
        Ok(NaturalParameter { theta, nu })
    }

    pub fn zeros(dim: usize) -> Self {
        NaturalParameter { theta: vec![Complex64::new(0.0, 0.0); dim], nu: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.re.is_finite() && v.im.is_finite()) && self.nu.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        NaturalParameter { theta: self.theta.iter().map(|v| v * s).collect(), nu: self.nu.iter().map(|v| v * s).collect() }
    }

    /// `a·self + b·other`
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        NaturalParameter {
            theta: self.theta.iter().zip(&other.theta).map(|(x, y)| x * a + y * b).collect(),
            nu: self.nu.iter().zip(&other.nu).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    /// `max(‖Δθ‖_∞, ‖Δν‖_∞)`
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let t = self.theta.iter().zip(&other.theta).fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        self.nu.iter().zip(&other.nu).fold(t, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> f64 {
        let t = self.theta.iter().fold(0.0f64, |m, a| m.max(a.norm()));
        self.nu.iter().fold(t, |m, a| m.max(a.abs()))
    }
}

/// Mean and marginal variances of a factorized Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vec<Complex64>,
    pub var: Vec<f64>,
}

/// Belief of `prior · exp(ϑ)`: `var_i = 1/(1/D_i − ν_i)`, `μ_i = var_i θ_i / 2`.
pub fn belief_of(np: &NaturalParameter, prior: &PriorModel) -> Result<GaussianBelief> {
    if np.dim() != prior.dim {
        return Err(invalid!("parameter dimension {} does not match prior dimension {}", np.dim(), prior.dim));
    }
    let mut mean = Vec::with_capacity(np.dim());
    let mut var = Vec::with_capacity(np.dim());
    for ((&d, &nu), &theta) in prior.variances.iter().zip(&np.nu).zip(&np.theta) {
        let precision = 1.0 / d - nu;
        if !(precision > 0.0) {
            return Err(Error::InvalidState(format!("nonpositive precision {precision}")));
        }
        let v = 1.0 / precision;
        var.push(v);
        mean.push(theta * (0.5 * v));
    }
    Ok(GaussianBelief { mean, var })
}

/// m-projection of the auxiliary point of observation `n` onto the factorized
/// family, using the true noise variance.
///
/// With `Λ = (D⁻¹ − Diag ν_n)⁻¹`, `β = σ² + Σ_i |γ_i|² Λ_i` and `c = γ^H Λ θ_n`:
///
/// ```text
/// θ_0n,i = (θ_n,i + γ_i (2 y_n − c)/β) / (1 − Λ_i |γ_i|²/β)
/// ν_0n,i = 1/D_i − 1/(Λ_i − Λ_i² |γ_i|²/β)
/// ```
pub fn m_project(np_n: &NaturalParameter, gamma_n: &[Complex64], y_n: Complex64, prior: &PriorModel) -> Result<NaturalParameter> {
    if gamma_n.len() != prior.dim {
        return Err(invalid!("row has length {}, expected {}", gamma_n.len(), prior.dim));
    }
    m_project_with(np_n, gamma_n, y_n, &prior.variances, prior.noise_var, false)
}

/// Projection kernel. With `unit_modulus` the weights `|γ_i|²` are taken as
/// exactly one, which keeps the second-order parameters of all observations
/// bitwise identical.
fn m_project_with(
    np_n: &NaturalParameter,
    gamma: &[Complex64],
    y_n: Complex64,
    variances: &[f64],
    noise_var: f64,
    unit_modulus: bool,
) -> Result<NaturalParameter> {
    let m = variances.len();
    let mut lambda = Vec::with_capacity(m);
    for (&d, &nu) in variances.iter().zip(&np_n.nu) {
        let precision = 1.0 / d - nu;
        if !(precision > 0.0) {
            return Err(Error::InvalidState(format!("nonpositive precision {precision} before projection")));
        }
        lambda.push(1.0 / precision);
    }
    let weight = |g: &Complex64| if unit_modulus { 1.0 } else { g.norm_sqr() };
    let beta = noise_var + gamma.iter().zip(&lambda).map(|(g, l)| weight(g) * l).sum::<f64>();
    let c: Complex64 = gamma.iter().zip(&lambda).zip(&np_n.theta).map(|((g, l), t)| g.conj() * t * *l).sum();
    let r = (y_n * 2.0 - c) / beta;

    let mut theta = Vec::with_capacity(m);
    let mut nu = Vec::with_capacity(m);
    for i in 0..m {
        let shrink = 1.0 - lambda[i] * weight(&gamma[i]) / beta;
        let var = lambda[i] * shrink;
        if !(shrink > 0.0 && var > 0.0) {
            return Err(Error::InvalidState(format!("singular projection at coordinate {i}")));
        }
        theta.push((np_n.theta[i] + gamma[i] * r) / shrink);
        nu.push(1.0 / variances[i] - 1.0 / var);
    }
    Ok(NaturalParameter { theta, nu })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgaState {
    pub per_obs: Vec<NaturalParameter>,
    pub objective: NaturalParameter,
    pub projections: Vec<NaturalParameter>,
    pub damping: f64,
    pub t: usize,
}

impl IgaState {
    /// All parameters zero.
    pub fn zeros(dim: usize, n_obs: usize, damping: f64) -> Self {
        IgaState {
            per_obs: vec![NaturalParameter::zeros(dim); n_obs],
            objective: NaturalParameter::zeros(dim),
            projections: vec![NaturalParameter::zeros(dim); n_obs],
            damping,
            t: 0,
        }
    }

    /// `max_{n,n'} ‖ν_n − ν_n'‖_∞`.
    pub fn nu_spread(&self) -> f64 {
        let m = self.objective.dim();
        (0..m)
            .map(|i| {
                let (lo, hi) = self.per_obs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.nu[i]), hi.max(p.nu[i])));
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

/// One IGA problem instance with the rows `γ_n` extracted once.
pub struct IgaProblem<'a> {
    rows: Vec<Vec<Complex64>>,
    y: &'a [Complex64],
    prior: &'a PriorModel,
    unit_modulus: bool,
}

impl<'a> IgaProblem<'a> {
    pub fn new<O: LinearOperator + ?Sized>(op: &O, obs: &'a Observation, prior: &'a PriorModel) -> Result<Self> {
        if op.n_cols() != prior.dim {
            return Err(invalid!("operator has {} columns, prior has {} variables", op.n_cols(), prior.dim));
        }
        if obs.y.len() != op.n_rows() {
            return Err(invalid!("observation has length {}, operator has {} rows", obs.y.len(), op.n_rows()));
        }
        let rows = (0..op.n_rows()).map(|n| op.row(n)).collect::<Result<Vec<_>>>()?;
        Ok(IgaProblem { rows, y: &obs.y, prior, unit_modulus: op.is_unit_modulus() })
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn initial_state(&self, damping: f64) -> IgaState {
        IgaState::zeros(self.prior.dim, self.n_obs(), damping)
    }

    /// One damped Jacobi sweep. Projections run in parallel; the sums are
    /// accumulated in observation order so results do not depend on the
    /// thread count.
    pub fn step(&self, state: &IgaState) -> Result<IgaState> {
        if state.per_obs.len() != self.n_obs() {
            return Err(invalid!("state has {} observation parameters, expected {}", state.per_obs.len(), self.n_obs()));
        }
        let d = state.damping;
        let projections = (0..self.n_obs())
            .into_par_iter()
            .map(|n| m_project_with(&state.per_obs[n], &self.rows[n], self.y[n], &self.prior.variances, self.prior.noise_var, self.unit_modulus))
            .collect::<Result<Vec<_>>>()?;
        let xi: Vec<NaturalParameter> = projections.iter().zip(&state.per_obs).map(|(p, v)| p.combine(1.0, v, -1.0)).collect();
        let mut total = NaturalParameter::zeros(self.prior.dim);
        for x in &xi {
            total = total.combine(1.0, x, 1.0);
        }
        let per_obs = xi.iter().zip(&state.per_obs).map(|(x, v)| total.combine(d, x, -d).combine(1.0, v, 1.0 - d)).collect();
        let objective = total.combine(d, &state.objective, 1.0 - d);
        Ok(IgaState { per_obs, objective, projections, damping: d, t: state.t + 1 })
    }
}

/// [`IgaProblem::step`] for a one-off call.
pub fn iga_step<O: LinearOperator + ?Sized>(state: &IgaState, op: &O, obs: &Observation, prior: &PriorModel) -> Result<IgaState> {
    IgaProblem::new(op, obs, prior)?.step(state)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgaTraceRow {
    pub t: usize,
    pub residual: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    pub theta_norm: f64,
}

#[derive(Clone, Debug)]
pub struct IgaRun {
    pub state: IgaState,
    pub belief: GaussianBelief,
    pub trace: Vec<IgaTraceRow>,
    pub converged: bool,
}

impl IgaRun {
    pub fn iterations(&self) -> usize {
        self.state.t
    }
}

fn relative_change(new: &NaturalParameter, old: &NaturalParameter) -> f64 {
    new.max_abs_diff(old) / (1.0 + new.max_abs())
}

/// Iterates from the zero state until the largest relative change of any
/// parameter is at most `tol` or `max_iter` sweeps have run.
pub fn iga_run<O: LinearOperator + ?Sized>(op: &O, obs: &Observation, prior: &PriorModel, damping: f64, max_iter: usize, tol: f64) -> Result<IgaRun> {
    iga_run_observed(op, obs, prior, damping, max_iter, tol, |_| {})
}

/// [`iga_run`] with a callback invoked on every new state (including the
/// initial one).
pub fn iga_run_observed<O, F>(op: &O, obs: &Observation, prior: &PriorModel, damping: f64, max_iter: usize, tol: f64, mut observe: F) -> Result<IgaRun>
where
    O: LinearOperator + ?Sized,
    F: FnMut(&IgaState),
{
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(invalid!("damping {damping} outside (0, 1]"));
    }
    if !(tol >= 0.0) {
        return Err(invalid!("tolerance must be nonnegative"));
    }
    let problem = IgaProblem::new(op, obs, prior)?;
    let mut state = problem.initial_state(damping);
    observe(&state);
    let mut trace = Vec::new();
    let mut converged = false;
    while state.t < max_iter {
        let next = problem.step(&state).map_err(|e| match e {
            Error::InvalidState(detail) => Error::Divergence { iteration: state.t + 1, detail },
            other => other,
        })?;
        if !next.objective.is_finite() || next.per_obs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { iteration: next.t, detail: "non-finite natural parameter".into() });
        }
        let residual =
            next.per_obs.iter().zip(&state.per_obs).map(|(a, b)| relative_change(a, b)).fold(relative_change(&next.objective, &state.objective), f64::max);
        let nu = &next.objective.nu;
        trace.push(IgaTraceRow {
            t: next.t,
            residual,
            nu_min: nu.iter().copied().fold(f64::INFINITY, f64::min),
            nu_max: nu.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            theta_norm: crate::linalg::norm(&next.objective.theta),
        });
        state = next;
        observe(&state);
        if residual <= tol {
            converged = true;
            break;
        }
    }
    let belief = belief_of(&state.objective, prior)?;
    Ok(IgaRun { state, belief, trace, converged })
}

pub fn write_trace_csv(trace: &[IgaTraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(1/(N M)) Σ_n ‖θ_n − ((N−1)/N) θ_0‖²_D` for a converged state.
pub fn theorem2_error(state: &IgaState, prior: &PriorModel) -> Result<f64> {
    let n = state.per_obs.len();
    if n < 2 {
        return Err(invalid!("the statistic needs at least two observations"));
    }
    let m = prior.dim;
    let scale = (n - 1) as f64 / n as f64;
    let mut total = 0.0;
    for p in &state.per_obs {
        for i in 0..m {
            total += prior.variances[i] * (p.theta[i] - state.objective.theta[i] * scale).norm_sqr();
        }
    }
    Ok(total / (n * m) as f64)
}

/// Writes any serializable rows to CSV with a header line.
pub(crate) fn write_rows<T: Serialize>(rows: &[T], mut w: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(&mut w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::DenseOperator;
    use nalgebra::DMatrix;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_prior() -> PriorModel {
        PriorModel::uncalibrated(vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn belief_examples() {
        let p = unit_prior();
        let b = belief_of(&NaturalParameter::zeros(1), &p).unwrap();
        assert_eq!((b.mean[0], b.var[0]), (c(0.0, 0.0), 1.0));
        let b = belief_of(&NaturalParameter::new(vec![c(2.0, 0.0)], vec![-1.0]).unwrap(), &p).unwrap();
        assert_eq!((b.mean[0], b.var[0]), (c(0.5, 0.0), 0.5));
        let bad = NaturalParameter::new(vec![c(0.0, 0.0)], vec![1.0]).unwrap();
        assert!(matches!(belief_of(&bad, &p), Err(Error::InvalidState(_))));
    }

    #[test]
    fn projection_examples() {
        let p = unit_prior();
        let out = m_project(&NaturalParameter::zeros(1), &[c(1.0, 0.0)], c(1.0, 0.0), &p).unwrap();
        assert!((out.theta[0] - c(2.0, 0.0)).norm() < 1e-15);
        assert!((out.nu[0] + 1.0).abs() < 1e-15);
        let zero = m_project(&NaturalParameter::zeros(1), &[c(0.6, 0.8)], c(0.0, 0.0), &p).unwrap();
        assert_eq!(zero.theta[0], c(0.0, 0.0));
    }

    #[test]
    fn zero_damping_only_advances_counter() {
        let op = DenseOperator::random_unit_modulus(4, 2, 1);
        let prior = PriorModel::uncalibrated(vec![1.0, 2.0], 0.5).unwrap();
        let obs = Observation::new(vec![c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.5), c(0.2, 0.2)]);
        let mut s = IgaState::zeros(2, 4, 0.3);
        s.per_obs[1].theta[0] = c(0.4, -0.1);
        s.damping = 0.0;
        let next = iga_step(&s, &op, &obs, &prior).unwrap();
        assert_eq!(next.per_obs, s.per_obs);
        assert_eq!(next.objective, s.objective);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn one_undamped_step_by_hand() {
        // N = 2, M = 1, A = [1; 1], y = [1; 1]: each projection gives (2, −1)
        // from the zero state, so ξ_n = (2, −1), ϑ_n = ξ_other, ϑ_0 = (4, −2).
        let op = DenseOperator::new(DMatrix::from_element(2, 1, c(1.0, 0.0))).unwrap();
        let obs = Observation::new(vec![c(1.0, 0.0); 2]);
        let s = iga_step(&IgaState::zeros(1, 2, 1.0), &op, &obs, &unit_prior()).unwrap();
        for p in &s.per_obs {
            assert!((p.theta[0] - c(2.0, 0.0)).norm() < 1e-15 && (p.nu[0] + 1.0).abs() < 1e-15);
        }
        assert!((s.objective.theta[0] - c(4.0, 0.0)).norm() < 1e-15);
        assert!((s.objective.nu[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn run_rejects_bad_damping_and_requires_two_observations() {
        let op = DenseOperator::random_unit_modulus(3, 2, 0);
        let prior = PriorModel::uncalibrated(vec![1.0, 1.0], 1.0).unwrap();
        let obs = Observation::new(vec![c(1.0, 0.0); 3]);
        assert!(iga_run(&op, &obs, &prior, 0.0, 10, 1e-8).is_err());
        assert!(iga_run(&op, &obs, &prior, 1.5, 10, 1e-8).is_err());
        let single = IgaState::zeros(2, 1, 0.5);
        assert!(theorem2_error(&single, &prior).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_rows(&[IgaTraceRow { t: 1, residual: 0.5, nu_min: -1.0, nu_max: -0.5, theta_norm: 2.0 }], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,residual,nu_min,nu_max,theta_norm\n1,0.5,-1.0,-0.5,2.0"));
    }
}
