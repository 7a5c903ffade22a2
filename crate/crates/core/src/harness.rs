//! Monte-Carlo NMSE experiments.
//!
//! A configuration fixes one measurement operator and one power profile (both
//! derived from the configuration seed). For every trial a channel is drawn;
//! for every (SNR, trial) pair one observation is drawn and handed to every
//! estimator, so estimators are compared on common random numbers. Cells run
//! in parallel and are aggregated in (estimator, SNR, trial) order, which
//! makes `results.csv` independent of the thread count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eiga::{Eiga, EigaOptions, EigaTraceRow};
use crate::error::{invalid, Error, Result};
use crate::iga::{iga_run, write_rows, IgaTraceRow};
use crate::model::{build_prior, generate_power_spec, observe, sample_channel, PowerSpec, PriorModel};
use crate::operator::{damping_bounds, default_phase_shifts, DenseOperator, FineFactors, LinearOperator, MeasurementOperator, StructuredOperator};
use crate::oracle;

/// NMSE values are floored here instead of reporting `−∞`.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Eiga,
    Iga,
    Mmse,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Eiga => "eiga",
            Estimator::Iga => "iga",
            Estimator::Mmse => "mmse",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eiga" => Ok(Estimator::Eiga),
            "iga" => Ok(Estimator::Iga),
            "mmse" => Ok(Estimator::Mmse),
            other => Err(invalid!("unknown estimator '{other}' (expected eiga, iga or mmse)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// Kronecker partial-DFT operator; each user contributes
    /// `clusters_per_user` runs of `cluster_width` active beam-delay
    /// coefficients.
    Structured {
        n_rv: usize,
        n_rh: usize,
        n_p: usize,
        fine_factors: FineFactors,
        users: usize,
        #[serde(default)]
        phase_shifts: Option<Vec<usize>>,
        clusters_per_user: usize,
        cluster_width: usize,
    },
    /// Random unit-modulus `n_obs x n_vars` matrix with a clustered profile.
    DenseRandom {
        n_obs: usize,
        n_vars: usize,
        #[serde(default = "one")]
        clusters: usize,
        #[serde(default)]
        cluster_width: Option<usize>,
    },
}

fn one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub snr_db_list: Vec<f64>,
    pub estimators: Vec<Estimator>,
    /// Per-estimator damping; missing entries use the operator's default.
    #[serde(default)]
    pub damping: BTreeMap<Estimator, f64>,
    pub trials: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Calibrate the virtual noise for EIGA (requires fewer variables than observations).
    #[serde(default = "default_true")]
    pub calibrate_virtual_noise: bool,
    /// Write one convergence trace per iterative (estimator, SNR, trial).
    #[serde(default)]
    pub traces: bool,
    /// Measure wall time; off by default so `results.csv` is reproducible.
    #[serde(default)]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db_list.is_empty() || self.snr_db_list.iter().any(|s| !s.is_finite()) {
            return Err(invalid!("snr_db_list must be a nonempty list of finite values"));
        }
        if self.estimators.is_empty() {
            return Err(invalid!("no estimators selected"));
        }
        if self.trials == 0 {
            return Err(invalid!("trials must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(invalid!("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid!("tol must be positive"));
        }
        if let Some((e, d)) = self.damping.iter().find(|(_, &d)| !(d > 0.0 && d <= 1.0)) {
            return Err(invalid!("damping {d} for {} outside (0, 1]", e.name()));
        }
        Ok(())
    }
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub estimator: String,
    pub snr_db: f64,
    pub nmse_db: f64,
    pub mean_iterations: f64,
    /// Seconds; empty unless timing was requested.
    pub wall_time_per_iteration: Option<f64>,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: String,
    pub snr_db: f64,
    pub failed_trials: usize,
    pub unconverged_trials: usize,
    pub damping: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub n_obs: usize,
    pub n_vars: usize,
    pub full_dim: usize,
    pub unit_modulus: bool,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub estimator: Estimator,
    pub snr_index: usize,
    pub trial: usize,
    pub rows: TraceRows,
}

#[derive(Clone, Debug)]
pub enum TraceRows {
    Eiga(Vec<EigaTraceRow>),
    Iga(Vec<IgaTraceRow>),
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub problem: ProblemSummary,
    pub records: Vec<ResultRecord>,
    pub cells: Vec<CellSummary>,
    pub traces: Vec<Trace>,
}

/// Fixed operator and power profile of an experiment.
pub struct Problem {
    pub op: MeasurementOperator,
    pub spec: PowerSpec,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-experiment `index` of kind `purpose` under `seed`.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(purpose.wrapping_mul(0x1_0000_0001) ^ splitmix64(index)))
}

pub const SEED_PROBLEM: u64 = 1;
pub const SEED_TRIAL: u64 = 2;
pub const SEED_NOISE: u64 = 3;

pub fn build_problem(scenario: &Scenario, seed: u64) -> Result<Problem> {
    let base = derive_seed(seed, SEED_PROBLEM, 0);
    match scenario {
        Scenario::Structured { n_rv, n_rh, n_p, fine_factors, users, phase_shifts, clusters_per_user, cluster_width } => {
            if *users == 0 {
                return Err(invalid!("need at least one user"));
            }
            let shifts = match phase_shifts {
                Some(s) if s.len() != *users => return Err(invalid!("{} phase shifts for {users} users", s.len())),
                Some(s) => s.clone(),
                None => default_phase_shifts(*users, fine_factors.tau, *n_p),
            };
            let grid = StructuredOperator::new(*n_rv, *n_rh, *n_p, *fine_factors, shifts, vec![0])?;
            let full = grid.full_cols();
            let per_user = (0..*users)
                .map(|k| generate_power_spec(full, *clusters_per_user, *cluster_width, derive_seed(base, SEED_PROBLEM, k as u64)).map(|s| s.powers))
                .collect::<Result<Vec<_>>>()?;
            let spec = PowerSpec::new(grid.aggregate_powers(&per_user)?, base)?;
            let op = grid.with_extraction(spec.support())?;
            Ok(Problem { op: op.into(), spec })
        }
        Scenario::DenseRandom { n_obs, n_vars, clusters, cluster_width } => {
            let width = cluster_width.unwrap_or(n_vars / (*clusters).max(1));
            let spec = generate_power_spec(*n_vars, *clusters, width, base)?;
            let op = DenseOperator::random_unit_modulus(*n_obs, spec.nonzero_count(), base);
            Ok(Problem { op: op.into(), spec })
        }
    }
}

/// `10 log10(mean_n ‖h_n − ĥ_n‖² / ‖h_n‖²)`, floored at −300 dB. Pairs with
/// a zero truth are skipped with a warning.
pub fn nmse(estimates: &[Vec<Complex64>], truths: &[Vec<Complex64>]) -> Result<f64> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(invalid!("need matching nonempty lists, got {} estimates and {} truths", estimates.len(), truths.len()));
    }
    let mut ratios = Vec::with_capacity(truths.len());
    for (k, (est, truth)) in estimates.iter().zip(truths).enumerate() {
        if est.len() != truth.len() {
            return Err(invalid!("pair {k}: estimate length {} differs from truth length {}", est.len(), truth.len()));
        }
        match squared_error_ratio(est, truth) {
            Some(r) => ratios.push(r),
            None => warn!("pair {k}: zero-norm truth excluded from NMSE"),
        }
    }
    if ratios.is_empty() {
        return Err(invalid!("every truth vector has zero norm"));
    }
    Ok(ratio_to_db(ratios.iter().sum::<f64>() / ratios.len() as f64))
}

fn squared_error_ratio(est: &[Complex64], truth: &[Complex64]) -> Option<f64> {
    let denom: f64 = truth.iter().map(|v| v.norm_sqr()).sum();
    (denom > 0.0).then(|| est.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / denom)
}

fn ratio_to_db(r: f64) -> f64 {
    if r > 0.0 {
        (10.0 * r.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

struct Outcome {
    /// `None` for a failed trial or a zero-norm channel.
    ratio: Option<f64>,
    failed: bool,
    converged: bool,
    iterations: usize,
    seconds: f64,
    trace: Option<TraceRows>,
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    problem: &'a Problem,
    priors: Vec<PriorModel>,
    damping: BTreeMap<Estimator, f64>,
}

impl Runner<'_> {
    fn run_one(&self, estimator: Estimator, prior: &PriorModel, obs: &crate::model::Observation, h: &[Complex64]) -> Outcome {
        let start = Instant::now();
        let cfg = self.config;
        let op = &self.problem.op;
        let result: Result<(Vec<Complex64>, usize, bool, Option<TraceRows>)> = match estimator {
            Estimator::Eiga => Eiga::new(op, obs, prior)
                .and_then(|solver| {
                    solver.run(&EigaOptions { damping: self.damping.get(&estimator).copied(), max_iter: cfg.max_iter, tol: cfg.tol, nu_init: None })
                })
                .map(|r| (r.belief.mean, r.iterations, r.converged, cfg.traces.then_some(TraceRows::Eiga(r.trace)))),
            Estimator::Iga => iga_run(op, obs, prior, self.damping[&estimator], cfg.max_iter, cfg.tol).map(|r| {
                let iterations = r.iterations();
                (r.belief.mean, iterations, r.converged, cfg.traces.then_some(TraceRows::Iga(r.trace)))
            }),
            Estimator::Mmse => oracle::mmse(op, prior, &obs.y).map(|p| (p.mean, 0, true, None)),
        };
        let seconds = start.elapsed().as_secs_f64();
        match result {
            Ok((mean, iterations, converged, trace)) => Outcome { ratio: squared_error_ratio(&mean, h), failed: false, converged, iterations, seconds, trace },
            Err(e) => {
                warn!("{} failed: {e}", estimator.name());
                Outcome { ratio: None, failed: true, converged: false, iterations: 0, seconds, trace: None }
            }
        }
    }
}

/// Runs every (estimator, SNR, trial) cell of `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let problem = build_problem(&config.scenario, config.seed)?;
    let op = &problem.op;
    let priors = config
        .snr_db_list
        .iter()
        .map(|snr| {
            let noise_var = 10f64.powf(-snr / 10.0);
            build_prior(&problem.spec, noise_var, op.n_rows(), config.calibrate_virtual_noise).map(|(p, _)| p)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut damping = config.damping.clone();
    let iterative = [Estimator::Eiga, Estimator::Iga];
    if iterative.iter().any(|e| config.estimators.contains(e) && !damping.contains_key(e)) {
        let d = damping_bounds(op, None)?.recommended();
        for e in iterative {
            damping.entry(e).or_insert(d);
        }
    }

    info!(
        "problem: N = {}, M = {} (of {} candidate columns); {} trials x {} SNR points; damping {:?}",
        op.n_rows(),
        op.n_cols(),
        problem.spec.full_dim,
        config.trials,
        config.snr_db_list.len(),
        damping
    );
    let runner = Runner { config, problem: &problem, priors, damping };
    let n_snr = config.snr_db_list.len();
    let cells: Vec<(usize, usize)> = (0..config.trials).flat_map(|t| (0..n_snr).map(move |s| (t, s))).collect();
    let outcomes: Vec<Vec<Outcome>> = cells
        .par_iter()
        .map(|&(trial, s)| {
            let prior = &runner.priors[s];
            let h = sample_channel(prior, derive_seed(config.seed, SEED_TRIAL, trial as u64));
            let noise_seed = derive_seed(config.seed, SEED_NOISE, (trial * n_snr + s) as u64);
            match observe(op, &h, prior.noise_var, noise_seed) {
                Ok(obs) => config.estimators.iter().map(|&e| runner.run_one(e, prior, &obs, &h)).collect(),
                Err(e) => {
                    warn!("observation failed: {e}");
                    config
                        .estimators
                        .iter()
                        .map(|_| Outcome { ratio: None, failed: true, converged: false, iterations: 0, seconds: 0.0, trace: None })
                        .collect()
                }
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut traces = Vec::new();
    for (ei, &estimator) in config.estimators.iter().enumerate() {
        for (s, &snr_db) in config.snr_db_list.iter().enumerate() {
            let cell: Vec<(usize, &Outcome)> = (0..config.trials).map(|t| (t, &outcomes[t * n_snr + s][ei])).collect();
            let ok: Vec<&Outcome> = cell.iter().map(|(_, o)| *o).filter(|o| !o.failed).collect();
            let failed = cell.len() - ok.len();
            if ok.is_empty() {
                return Err(Error::AllTrialsFailed { estimator: estimator.name().into(), snr_db, trials: config.trials });
            }
            let ratios: Vec<f64> = ok.iter().filter_map(|o| o.ratio).collect();
            let nmse_db = if ratios.is_empty() { NMSE_FLOOR_DB } else { ratio_to_db(ratios.iter().sum::<f64>() / ratios.len() as f64) };
            let total_iterations: usize = ok.iter().map(|o| o.iterations).sum();
            let wall_time_per_iteration = config.timing.then(|| ok.iter().map(|o| o.seconds).sum::<f64>() / total_iterations.max(1) as f64);
            records.push(ResultRecord {
                estimator: estimator.name().into(),
                snr_db,
                nmse_db,
                mean_iterations: total_iterations as f64 / ok.len() as f64,
                wall_time_per_iteration,
                trials: ok.len(),
            });
            summaries.push(CellSummary {
                estimator: estimator.name().into(),
                snr_db,
                failed_trials: failed,
                unconverged_trials: ok.iter().filter(|o| !o.converged).count(),
                damping: runner.damping.get(&estimator).copied(),
            });
            for (trial, o) in cell {
                if let Some(rows) = &o.trace {
                    traces.push(Trace { estimator, snr_index: s, trial, rows: rows.clone() });
                }
            }
        }
    }
    info!("finished {} cells", records.len());
    Ok(ExperimentOutput {
        config: config.clone(),
        problem: ProblemSummary { n_obs: op.n_rows(), n_vars: op.n_cols(), full_dim: problem.spec.full_dim, unit_modulus: op.is_unit_modulus() },
        records,
        cells: summaries,
        traces,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    version: &'static str,
    git_describe: String,
    config: &'a ExperimentConfig,
    problem: &'a ProblemSummary,
    records: &'a [ResultRecord],
    cells: &'a [CellSummary],
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_results_csv(records: &[ResultRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(["estimator", "snr_db", "nmse_db", "mean_iterations", "wall_time_per_iteration", "trials"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRecord>, _>>()?)
}

/// Writes `results.csv`, `summary.json` and (when present) `traces/*.csv`
/// under `dir`.
pub fn emit(output: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_results_csv(&output.records, dir.join("results.csv"))?;

    let summary = Summary {
        version: env!("CARGO_PKG_VERSION"),
        git_describe: git_describe(),
        config: &output.config,
        problem: &output.problem,
        records: &output.records,
        cells: &output.cells,
    };
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    if !output.traces.is_empty() {
        let tdir = dir.join("traces");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        for t in &output.traces {
            let path = tdir.join(format!("{}_snr{}_trial{}.csv", t.estimator.name(), t.snr_index, t.trial));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let w = std::io::BufWriter::new(file);
            match &t.rows {
                TraceRows::Eiga(rows) => write_rows(rows, w)?,
                TraceRows::Iga(rows) => write_rows(rows, w)?,
            }
        }
    }
    Ok(())
}
