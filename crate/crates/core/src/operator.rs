//! Measurement operators `A` with forward and adjoint application.
//!
//! [`DenseOperator`] stores the matrix explicitly. [`StructuredOperator`] is the
//! Kronecker partial-DFT operator `A = (F_d ⊗ V_v ⊗ V_h) E` of an OFDM array with
//! phase-shift pilots, evaluated with three batched FFTs per application and
//! never materialized unless asked to.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::rng::{self, streams};

pub const UNIT_MODULUS_TOL: f64 = 1e-12;

/// Largest column count for which dense spectral computations are allowed.
pub const DENSE_GUARD: usize = 4096;

pub trait LinearOperator: Send + Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;

    /// `A x`.
    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>>;

    /// `A^H s`.
    fn adjoint_apply(&self, s: &[Complex64]) -> Result<Vec<Complex64>>;

    /// Dense copy of `A` (N x M).
    fn materialize(&self) -> DMatrix<Complex64>;

    /// True when every entry has unit magnitude.
    fn is_unit_modulus(&self) -> bool;

    /// Product of the fine factors, for operators with Kronecker DFT structure.
    fn fine_product(&self) -> Option<usize> {
        None
    }

    /// `γ_n`, the conjugate of the n-th row of `A`.
    fn row(&self, n: usize) -> Result<Vec<Complex64>> {
        if n >= self.n_rows() {
            return Err(invalid!("row {n} out of range for {} rows", self.n_rows()));
        }
        let mut e = vec![Complex64::new(0.0, 0.0); self.n_rows()];
        e[n] = Complex64::new(1.0, 0.0);
        self.adjoint_apply(&e)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn n_rows(&self) -> usize {
        (**self).n_rows()
    }
    fn n_cols(&self) -> usize {
        (**self).n_cols()
    }
    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        (**self).apply(x)
    }
    fn adjoint_apply(&self, s: &[Complex64]) -> Result<Vec<Complex64>> {
        (**self).adjoint_apply(s)
    }
    fn materialize(&self) -> DMatrix<Complex64> {
        (**self).materialize()
    }
    fn is_unit_modulus(&self) -> bool {
        (**self).is_unit_modulus()
    }
    fn fine_product(&self) -> Option<usize> {
        (**self).fine_product()
    }
    fn row(&self, n: usize) -> Result<Vec<Complex64>> {
        (**self).row(n)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(invalid!("{what} has length {got}, expected {want}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    entries: DMatrix<Complex64>,
    unit_modulus: bool,
}

impl DenseOperator {
    pub fn new(entries: DMatrix<Complex64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(invalid!("operator must have at least one row and one column"));
        }
        if entries.iter().any(|a| !(a.re.is_finite() && a.im.is_finite())) {
            return Err(invalid!("operator entries must be finite"));
        }
        let unit_modulus = entries.iter().all(|a| (a.norm() - 1.0).abs() <= UNIT_MODULUS_TOL);
        Ok(DenseOperator { entries, unit_modulus })
    }

    /// N x M matrix of independent uniformly random phases.
    pub fn random_unit_modulus(n_rows: usize, n_cols: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, streams::OPERATOR);
        let entries = DMatrix::from_fn(n_rows, n_cols, |_, _| {
            let phase: f64 = rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU);
            Complex64::from_polar(1.0, phase)
        });
        DenseOperator { entries, unit_modulus: true }
    }

    /// Rank-one unit-modulus matrix `u v^H` with random phase vectors.
    pub fn random_rank_one(n_rows: usize, n_cols: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, streams::OPERATOR);
        let mut phases = |n: usize| -> Vec<Complex64> {
            (0..n).map(|_| Complex64::from_polar(1.0, rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU))).collect()
        };
        let u = phases(n_rows);
        let v = phases(n_cols);
        let entries = DMatrix::from_fn(n_rows, n_cols, |i, j| u[i] * v[j].conj());
        DenseOperator { entries, unit_modulus: true }
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    /// Writes the column-major binary form: eight little-endian `u64` header
    /// words `[magic, version, N, M, flags, 0, 0, 0]` followed by `N*M`
    /// `(re, im)` pairs of little-endian `f64`. Flag bit 0 marks unit modulus.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = [DENSE_MAGIC, DENSE_VERSION, self.entries.nrows() as u64, self.entries.ncols() as u64, u64::from(self.unit_modulus), 0, 0, 0];
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        for word in header {
            write(&word.to_le_bytes())?;
        }
        // nalgebra storage is column-major already
        for a in self.entries.iter() {
            write(&a.re.to_le_bytes())?;
            write(&a.im.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut word = [0u8; 8];
        let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
            r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
            Ok(word)
        };
        let mut header = [0u64; 8];
        for h in header.iter_mut() {
            *h = u64::from_le_bytes(next(&mut r)?);
        }
        if header[0] != DENSE_MAGIC {
            return Err(invalid!("{}: not a dense operator file", path.display()));
        }
        if header[1] != DENSE_VERSION {
            return Err(invalid!("{}: unsupported version {}", path.display(), header[1]));
        }
        let (n, m) = (header[2] as usize, header[3] as usize);
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n * m {
            let re = f64::from_le_bytes(next(&mut r)?);
            let im = f64::from_le_bytes(next(&mut r)?);
            data.push(Complex64::new(re, im));
        }
        DenseOperator::new(DMatrix::from_vec(n, m, data))
    }
}

pub const DENSE_MAGIC: u64 = u64::from_le_bytes(*b"EIGADENS");
pub const DENSE_VERSION: u64 = 1;

impl LinearOperator for DenseOperator {
    fn n_rows(&self) -> usize {
        self.entries.nrows()
    }
    fn n_cols(&self) -> usize {
        self.entries.ncols()
    }
    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("input", x.len(), self.n_cols())?;
        Ok(linalg::matvec(&self.entries, x))
    }
    fn adjoint_apply(&self, s: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("input", s.len(), self.n_rows())?;
        Ok(linalg::adjoint_matvec(&self.entries, s))
    }
    fn materialize(&self) -> DMatrix<Complex64> {
        self.entries.clone()
    }
    fn is_unit_modulus(&self) -> bool {
        self.unit_modulus
    }
    fn row(&self, n: usize) -> Result<Vec<Complex64>> {
        if n >= self.n_rows() {
            return Err(invalid!("row {n} out of range for {} rows", self.n_rows()));
        }
        Ok(self.entries.row(n).iter().map(|a| a.conj()).collect())
    }
}

// ---------------------------------------------------------------------------
// Structured

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineFactors {
    pub v: usize,
    pub h: usize,
    pub tau: usize,
}

impl FineFactors {
    pub fn new(v: usize, h: usize, tau: usize) -> Self {
        FineFactors { v, h, tau }
    }

    pub fn product(&self) -> usize {
        self.v * self.h * self.tau
    }
}

/// Serializable description of a [`StructuredOperator`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredSpec {
    pub n_rv: usize,
    pub n_rh: usize,
    pub n_p: usize,
    pub fine_factors: FineFactors,
    pub phase_shifts: Vec<usize>,
    pub extraction_indices: Vec<usize>,
}

#[derive(Clone)]
struct Plans {
    fwd_v: Arc<dyn Fft<f64>>,
    fwd_h: Arc<dyn Fft<f64>>,
    fwd_tau: Arc<dyn Fft<f64>>,
    inv_v: Arc<dyn Fft<f64>>,
    inv_h: Arc<dyn Fft<f64>>,
    inv_tau: Arc<dyn Fft<f64>>,
}

/// Kronecker partial-DFT measurement operator.
///
/// Rows are indexed `(p, a, b)` (subcarrier, vertical antenna, horizontal
/// antenna) with `b` fastest; pre-extraction columns are indexed
/// `(m, i, j)` (delay, vertical beam, horizontal beam) with `j` fastest:
///
/// ```text
/// A[(p,a,b), (m,i,j)] = w(p m, F_τ N_p) · w(a i, F_v N_rv) · w(b j, F_h N_rh),   w(k, L) = exp(-j2πk/L)
/// ```
///
/// Per-user phase shifts are folded into the extraction list (see
/// [`StructuredOperator::user_column`]); apply and adjoint only see the
/// aggregated layout.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "StructuredSpec", into = "StructuredSpec")]
pub struct StructuredOperator {
    spec: StructuredSpec,
    plans: Plans,
}

impl fmt::Debug for StructuredOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StructuredOperator").field("spec", &self.spec).finish()
    }
}

impl PartialEq for StructuredOperator {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl From<StructuredOperator> for StructuredSpec {
    fn from(op: StructuredOperator) -> Self {
        op.spec
    }
}

impl TryFrom<StructuredSpec> for StructuredOperator {
    type Error = Error;

    fn try_from(spec: StructuredSpec) -> Result<Self> {
        StructuredOperator::build(spec)
    }
}

/// Evenly spaced phase shifts `n_k = k ⌊F_τ N_p / K⌋`.
pub fn default_phase_shifts(k_users: usize, fine_tau: usize, n_p: usize) -> Vec<usize> {
    let spacing = (fine_tau * n_p).checked_div(k_users).unwrap_or(0);
    (0..k_users).map(|k| k * spacing).collect()
}

impl StructuredOperator {
    pub fn new(n_rv: usize, n_rh: usize, n_p: usize, fine_factors: FineFactors, phase_shifts: Vec<usize>, extraction_indices: Vec<usize>) -> Result<Self> {
        Self::build(StructuredSpec { n_rv, n_rh, n_p, fine_factors, phase_shifts, extraction_indices })
    }

    pub fn build(spec: StructuredSpec) -> Result<Self> {
        let f = spec.fine_factors;
        if [spec.n_rv, spec.n_rh, spec.n_p, f.v, f.h, f.tau].contains(&0) {
            return Err(invalid!("all dimensions and fine factors must be positive"));
        }
        let n_tau = f.tau * spec.n_p;
        if let Some(&s) = spec.phase_shifts.iter().find(|&&s| s >= n_tau) {
            return Err(invalid!("phase shift {s} outside [0, {n_tau})"));
        }
        let full = f.product() * spec.n_rv * spec.n_rh * spec.n_p;
        if spec.extraction_indices.is_empty() {
            return Err(invalid!("extraction list is empty"));
        }
        if let Some(&q) = spec.extraction_indices.iter().find(|&&q| q >= full) {
            return Err(invalid!("extraction index {q} outside [0, {full})"));
        }
        if spec.extraction_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("extraction indices must be strictly increasing"));
        }
        let mut planner = FftPlanner::new();
        let n_v = f.v * spec.n_rv;
        let n_h = f.h * spec.n_rh;
        let plans = Plans {
            fwd_v: planner.plan_fft_forward(n_v),
            fwd_h: planner.plan_fft_forward(n_h),
            fwd_tau: planner.plan_fft_forward(n_tau),
            inv_v: planner.plan_fft_inverse(n_v),
            inv_h: planner.plan_fft_inverse(n_h),
            inv_tau: planner.plan_fft_inverse(n_tau),
        };
        Ok(StructuredOperator { spec, plans })
    }

    pub fn spec(&self) -> &StructuredSpec {
        &self.spec
    }

    /// Same grid and phase shifts with a different extraction list.
    pub fn with_extraction(&self, extraction_indices: Vec<usize>) -> Result<Self> {
        Self::build(StructuredSpec { extraction_indices, ..self.spec.clone() })
    }

    pub fn fine_factors(&self) -> FineFactors {
        self.spec.fine_factors
    }

    pub fn phase_shifts(&self) -> &[usize] {
        &self.spec.phase_shifts
    }

    pub fn extraction_indices(&self) -> &[usize] {
        &self.spec.extraction_indices
    }

    /// Grid sizes `(F_v N_rv, F_h N_rh, F_τ N_p)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        let s = &self.spec;
        let f = s.fine_factors;
        (f.v * s.n_rv, f.h * s.n_rh, f.tau * s.n_p)
    }

    /// Column count before extraction, `F_v F_h F_τ N`.
    pub fn full_cols(&self) -> usize {
        let (a, b, c) = self.grid();
        a * b * c
    }

    /// Number of beams per delay column, `F_v F_h N_r`.
    pub fn beams(&self) -> usize {
        let (a, b, _) = self.grid();
        a * b
    }

    /// Position in the aggregated layout of user `user`'s coefficient at
    /// (`beam`, `delay`): the user's delay axis is cyclically shifted by its
    /// phase shift.
    pub fn user_column(&self, user: usize, beam: usize, delay: usize) -> Result<usize> {
        let (_, _, n_tau) = self.grid();
        let shift = *self.spec.phase_shifts.get(user).ok_or_else(|| invalid!("user {user} has no phase shift"))?;
        if beam >= self.beams() || delay >= n_tau {
            return Err(invalid!("(beam {beam}, delay {delay}) outside the {}x{n_tau} grid", self.beams()));
        }
        Ok(((delay + shift) % n_tau) * self.beams() + beam)
    }

    /// Aggregated power profile `Σ_k Ω_k^e Π_{n_k}` from per-user profiles laid
    /// out like the pre-extraction columns.
    pub fn aggregate_powers(&self, per_user: &[Vec<f64>]) -> Result<Vec<f64>> {
        if per_user.len() != self.spec.phase_shifts.len() {
            return Err(invalid!("{} user profiles for {} phase shifts", per_user.len(), self.spec.phase_shifts.len()));
        }
        let full = self.full_cols();
        let beams = self.beams();
        let mut out = vec![0.0; full];
        for (k, powers) in per_user.iter().enumerate() {
            check_len("user power profile", powers.len(), full)?;
            for (q, &p) in powers.iter().enumerate() {
                out[self.user_column(k, q % beams, q / beams)?] += p;
            }
        }
        Ok(out)
    }

    fn scatter(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut full = vec![Complex64::new(0.0, 0.0); self.full_cols()];
        for (&q, &v) in self.spec.extraction_indices.iter().zip(x) {
            full[q] = v;
        }
        full
    }
}

/// Runs `plan` along `axis` of a row-major 3-tensor. Lanes are zero-padded or
/// truncated from `dims[axis]` to the plan length, transformed, then cut to
/// `out_len`.
fn transform_axis(input: &[Complex64], dims: [usize; 3], axis: usize, out_len: usize, plan: &Arc<dyn Fft<f64>>) -> (Vec<Complex64>, [usize; 3]) {
    let len = plan.len();
    let in_len = dims[axis];
    debug_assert!(in_len <= len && out_len <= len);
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();

    let zero = Complex64::new(0.0, 0.0);
    let mut lanes = vec![zero; outer * inner * len];
    for o in 0..outer {
        for i in 0..inner {
            let lane = &mut lanes[(o * inner + i) * len..][..in_len];
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = input[(o * in_len + k) * inner + i];
            }
        }
    }
    plan.process(&mut lanes);

    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let mut out = vec![zero; outer * inner * out_len];
    for o in 0..outer {
        for i in 0..inner {
            let lane = &lanes[(o * inner + i) * len..][..out_len];
            for (k, &v) in lane.iter().enumerate() {
                out[(o * out_len + k) * inner + i] = v;
            }
        }
    }
    (out, out_dims)
}

impl LinearOperator for StructuredOperator {
    fn n_rows(&self) -> usize {
        self.spec.n_rv * self.spec.n_rh * self.spec.n_p
    }

    fn n_cols(&self) -> usize {
        self.spec.extraction_indices.len()
    }

    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("input", x.len(), self.n_cols())?;
        let (n_v, n_h, n_tau) = self.grid();
        let s = &self.spec;
        let full = self.scatter(x);
        let dims = [n_tau, n_v, n_h];
        let (t, dims) = transform_axis(&full, dims, 2, s.n_rh, &self.plans.fwd_h);
        let (t, dims) = transform_axis(&t, dims, 1, s.n_rv, &self.plans.fwd_v);
        let (t, _) = transform_axis(&t, dims, 0, s.n_p, &self.plans.fwd_tau);
        Ok(t)
    }

    fn adjoint_apply(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("input", y.len(), self.n_rows())?;
        let (n_v, n_h, n_tau) = self.grid();
        let s = &self.spec;
        let dims = [s.n_p, s.n_rv, s.n_rh];
        let (t, dims) = transform_axis(y, dims, 0, n_tau, &self.plans.inv_tau);
        let (t, dims) = transform_axis(&t, dims, 1, n_v, &self.plans.inv_v);
        let (t, _) = transform_axis(&t, dims, 2, n_h, &self.plans.inv_h);
        Ok(s.extraction_indices.iter().map(|&q| t[q]).collect())
    }

    fn materialize(&self) -> DMatrix<Complex64> {
        let (n_v, n_h, n_tau) = self.grid();
        let s = &self.spec;
        let twiddles =
            |len: usize| -> Vec<Complex64> { (0..len).map(|k| Complex64::from_polar(1.0, -std::f64::consts::TAU * k as f64 / len as f64)).collect() };
        let (tw_v, tw_h, tw_tau) = (twiddles(n_v), twiddles(n_h), twiddles(n_tau));
        let cols: Vec<(usize, usize, usize)> = s.extraction_indices.iter().map(|&q| (q / (n_v * n_h), (q / n_h) % n_v, q % n_h)).collect();
        DMatrix::from_fn(self.n_rows(), self.n_cols(), |row, col| {
            let (p, a, b) = (row / (s.n_rv * s.n_rh), (row / s.n_rh) % s.n_rv, row % s.n_rh);
            let (m, i, j) = cols[col];
            tw_tau[(p * m) % n_tau] * tw_v[(a * i) % n_v] * tw_h[(b * j) % n_h]
        })
    }

    fn is_unit_modulus(&self) -> bool {
        true
    }

    fn fine_product(&self) -> Option<usize> {
        Some(self.spec.fine_factors.product())
    }
}

// ---------------------------------------------------------------------------
// Either kind

#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementOperator {
    Dense(DenseOperator),
    Structured(StructuredOperator),
}

impl From<DenseOperator> for MeasurementOperator {
    fn from(op: DenseOperator) -> Self {
        MeasurementOperator::Dense(op)
    }
}

impl From<StructuredOperator> for MeasurementOperator {
    fn from(op: StructuredOperator) -> Self {
        MeasurementOperator::Structured(op)
    }
}

macro_rules! dispatch {
    ($self:ident, $op:ident => $e:expr) => {
        match $self {
            MeasurementOperator::Dense($op) => $e,
            MeasurementOperator::Structured($op) => $e,
        }
    };
}

impl LinearOperator for MeasurementOperator {
    fn n_rows(&self) -> usize {
        dispatch!(self, op => op.n_rows())
    }
    fn n_cols(&self) -> usize {
        dispatch!(self, op => op.n_cols())
    }
    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        dispatch!(self, op => op.apply(x))
    }
    fn adjoint_apply(&self, s: &[Complex64]) -> Result<Vec<Complex64>> {
        dispatch!(self, op => op.adjoint_apply(s))
    }
    fn materialize(&self) -> DMatrix<Complex64> {
        dispatch!(self, op => op.materialize())
    }
    fn is_unit_modulus(&self) -> bool {
        dispatch!(self, op => op.is_unit_modulus())
    }
    fn fine_product(&self) -> Option<usize> {
        dispatch!(self, op => op.fine_product())
    }
    fn row(&self, n: usize) -> Result<Vec<Complex64>> {
        dispatch!(self, op => op.row(n))
    }
}

// ---------------------------------------------------------------------------
// Spectral quantities

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    Exact,
    PowerIteration,
}

pub const POWER_ITERATION_TOL: f64 = 1e-6;
pub const POWER_ITERATION_MAX: usize = 10_000;

/// `N I - A^H A` as a dense Hermitian matrix.
pub fn centered_gram<O: LinearOperator + ?Sized>(op: &O) -> DMatrix<Complex64> {
    let a = op.materialize();
    let n = op.n_rows() as f64;
    let mut g = -(a.adjoint() * &a);
    for i in 0..g.nrows() {
        g[(i, i)] += n;
    }
    g
}

/// `ρ(N I - A^H A)`.
pub fn spectral_radius_centered<O: LinearOperator + ?Sized>(op: &O, method: SpectralMethod) -> Result<f64> {
    match method {
        SpectralMethod::Exact => {
            if op.n_cols() > DENSE_GUARD {
                return Err(invalid!("exact spectral radius needs M <= {DENSE_GUARD}, got {}", op.n_cols()));
            }
            let eig = linalg::hermitian_eigenvalues(centered_gram(op))?;
            Ok(eig.iter().fold(0.0f64, |acc, l| acc.max(l.abs())))
        }
        SpectralMethod::PowerIteration => power_iteration_centered(op, POWER_ITERATION_TOL, POWER_ITERATION_MAX),
    }
}

/// Power iteration on `G = N I - A^H A` using only apply/adjoint. With `v`
/// normalized, `‖G v‖² = v^H G² v` is the Rayleigh quotient of `G²`, which
/// converges to `ρ(G)²` from below regardless of the sign of the dominant
/// eigenvalue; iteration stops once successive estimates agree to `tol`.
pub fn power_iteration_centered<O: LinearOperator + ?Sized>(op: &O, tol: f64, max_iter: usize) -> Result<f64> {
    let n = op.n_rows() as f64;
    let apply_g = |v: &[Complex64]| -> Result<Vec<Complex64>> {
        let av = op.apply(v)?;
        let ahav = op.adjoint_apply(&av)?;
        Ok(v.iter().zip(&ahav).map(|(x, y)| x * n - y).collect())
    };
    let mut rng = rng::stream(0x5eed, streams::POWER_ITERATION);
    let mut v = rng::complex_gaussian_vec(&mut rng, op.n_cols(), 1.0);
    let nv = linalg::norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut prev = 0.0;
    for k in 0..max_iter {
        let w = apply_g(&v)?;
        let est = linalg::norm(&w);
        if est == 0.0 {
            return Ok(0.0);
        }
        if !est.is_finite() {
            return Err(Error::Numerical("power iteration produced a non-finite iterate".into()));
        }
        if k > 0 && (est - prev).abs() <= tol * est {
            return Ok(est);
        }
        prev = est;
        v = w.into_iter().map(|x| x / est).collect();
    }
    Err(Error::NonConvergence { iterations: max_iter, last_estimate: prev })
}

/// Sufficient damping bounds for the EIGA θ-iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampingBounds {
    pub rho: f64,
    /// `2 / (1 + ρ/N)`
    pub general: f64,
    /// `2 / M`
    pub worst_case: f64,
    /// `2 / (F_v F_h F_τ)`
    pub structured: Option<f64>,
    /// `2 / (K F_v F_h F_τ)`
    pub multi_user: Option<f64>,
}

impl DampingBounds {
    pub fn from_rho(rho: f64, n_rows: usize, n_cols: usize, fine_product: Option<usize>, k_users: Option<usize>) -> Self {
        let structured = fine_product.map(|f| 2.0 / f as f64);
        let multi_user = match (fine_product, k_users) {
            (Some(f), Some(k)) if k > 0 => Some(2.0 / (k * f) as f64),
            _ => None,
        };
        DampingBounds { rho, general: 2.0 / (1.0 + rho / n_rows as f64), worst_case: 2.0 / n_cols as f64, structured, multi_user }
    }

    /// Largest of the guaranteed bounds.
    pub fn loosest(&self) -> f64 {
        [Some(self.general), Some(self.worst_case), self.structured, self.multi_user].into_iter().flatten().fold(0.0, f64::max)
    }

    /// Default damping: 0.9 of the loosest guaranteed bound, capped at 1.
    pub fn recommended(&self) -> f64 {
        (0.9 * self.loosest()).min(1.0)
    }
}

/// Columns up to which [`damping_bounds`] uses the exact eigensolve.
pub const EXACT_RHO_MAX_COLS: usize = 512;

pub fn damping_bounds<O: LinearOperator + ?Sized>(op: &O, k_users: Option<usize>) -> Result<DampingBounds> {
    let method = if op.n_cols() <= EXACT_RHO_MAX_COLS { SpectralMethod::Exact } else { SpectralMethod::PowerIteration };
    damping_bounds_with(op, k_users, method)
}

pub fn damping_bounds_with<O: LinearOperator + ?Sized>(op: &O, k_users: Option<usize>, method: SpectralMethod) -> Result<DampingBounds> {
    let rho = spectral_radius_centered(op, method)?;
    Ok(DampingBounds::from_rho(rho, op.n_rows(), op.n_cols(), op.fine_product(), k_users))
}
