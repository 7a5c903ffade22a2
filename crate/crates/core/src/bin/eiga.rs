//! Command-line front end: experiments, damping bounds, asymptotic probes and
//! fixed-point diagnostics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 when
//! every trial of an experiment cell failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use eiga_core::analysis::{fixed_point_residuals, theorem9_probe, write_probe_csv, ProbeConfig};
use eiga_core::eiga::{Eiga, EigaOptions};
use eiga_core::harness::{build_problem, derive_seed, emit, run_experiment, Estimator, ExperimentConfig, Scenario, SEED_NOISE, SEED_TRIAL};
use eiga_core::model::{build_prior, observe, sample_channel};
use eiga_core::operator::{damping_bounds, LinearOperator};
use eiga_core::oracle::{lambda_beta, solve_nu_fixed_point};
use eiga_core::{Error, Result};

#[derive(Parser)]
#[command(name = "eiga", version, about = "Information-geometry estimation for linear-Gaussian models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo NMSE experiment.
    Run(RunArgs),
    /// Print the damping bounds of a scenario's operator as JSON.
    Bounds(BoundsArgs),
    /// Print the large-N table comparing the EIGA fixed point with MMSE as CSV.
    Probe(ProbeArgs),
    /// Print the ν fixed point, β* and fixed-point residuals for the first trial.
    FixedPoint(FixedPointArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of eiga, iga, mmse.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Comma-separated SNR values in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Damping for all iterative estimators, or `name=value` pairs (comma-separated).
    #[arg(long, value_delimiter = ',')]
    damping: Option<Vec<String>>,
    /// Write per-trial convergence traces.
    #[arg(long)]
    traces: bool,
    /// Record wall time per iteration.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of users for the multi-user bound.
    #[arg(long)]
    users: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Number of variables M.
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Comma-separated observation counts N.
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
    /// Number of seeds (0..seeds).
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    /// Use the true noise variance instead of the calibrated virtual noise.
    #[arg(long)]
    uncalibrated: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixedPointArgs {
    #[arg(long)]
    config: PathBuf,
    /// Index into the configuration's SNR list.
    #[arg(long, default_value_t = 0)]
    snr_index: usize,
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::InvalidArgument(_) | Error::Unsupported(_) | Error::Json(_) | Error::Io { .. })
}

fn apply_overrides(config: &mut ExperimentConfig, args: &RunArgs) -> Result<()> {
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(names) = &args.estimators {
        config.estimators = names.iter().map(|n| n.parse()).collect::<Result<_>>()?;
    }
    if let Some(snr) = &args.snr {
        config.snr_db_list = snr.clone();
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(items) = &args.damping {
        for item in items {
            let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad damping value '{v}'")));
            match item.split_once('=') {
                Some((name, value)) => {
                    config.damping.insert(name.parse()?, parse(value)?);
                }
                None => {
                    let d = parse(item)?;
                    config.damping.insert(Estimator::Eiga, d);
                    config.damping.insert(Estimator::Iga, d);
                }
            }
        }
    }
    config.traces |= args.traces;
    config.timing |= args.timing;
    config.validate()
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_path(&args.config)?;
    apply_overrides(&mut config, &args)?;
    let output = run_experiment(&config)?;
    emit(&output, &config.output_dir)?;
    for r in &output.records {
        println!("{:>5} {:>7.2} dB  NMSE {:>9.3} dB  iterations {:>8.1}", r.estimator, r.snr_db, r.nmse_db, r.mean_iterations);
    }
    Ok(())
}

fn bounds(args: BoundsArgs) -> Result<()> {
    let config = ExperimentConfig::from_path(&args.config)?;
    let problem = build_problem(&config.scenario, config.seed)?;
    let users = args.users.or(match config.scenario {
        Scenario::Structured { users, .. } => Some(users),
        Scenario::DenseRandom { .. } => None,
    });
    let b = damping_bounds(&problem.op, users)?;
    let report = json!({
        "n_obs": problem.op.n_rows(),
        "n_vars": problem.op.n_cols(),
        "bounds": b,
        "recommended": b.recommended(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let config = ProbeConfig {
        sizes: args.n.iter().map(|&n| (args.m, n)).collect(),
        noise_var: args.noise_var,
        seeds: (0..args.seeds).collect(),
        calibrate: !args.uncalibrated,
        tol: 1e-13,
    };
    let rows = theorem9_probe(&config)?;
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            write_probe_csv(&rows, file)
        }
        None => write_probe_csv(&rows, std::io::stdout().lock()),
    }
}

fn fixed_point(args: FixedPointArgs) -> Result<()> {
    let config = ExperimentConfig::from_path(&args.config)?;
    let snr = *config.snr_db_list.get(args.snr_index).ok_or_else(|| Error::InvalidArgument(format!("snr index {} out of range", args.snr_index)))?;
    let problem = build_problem(&config.scenario, config.seed)?;
    let op = &problem.op;
    let noise_var = 10f64.powf(-snr / 10.0);
    let (prior, _) = build_prior(&problem.spec, noise_var, op.n_rows(), config.calibrate_virtual_noise)?;
    let nu_star = solve_nu_fixed_point(&prior, op.n_rows(), 1e-13)?;
    let (lambda, beta) = lambda_beta(&prior, &nu_star)?;
    let n = op.n_rows() as f64;
    let identity_residual = nu_star
        .iter()
        .zip(&lambda)
        .zip(&prior.variances)
        .map(|((nu, l), d)| (n / (n - 1.0) * nu - (1.0 / d - 1.0 / (l - l * l / beta))).abs())
        .fold(0.0, f64::max);

    let h = sample_channel(&prior, derive_seed(config.seed, SEED_TRIAL, 0));
    let obs = observe(op, &h, noise_var, derive_seed(config.seed, SEED_NOISE, (args.snr_index) as u64))?;
    let solver = Eiga::new(op, &obs, &prior)?;
    let options = EigaOptions { damping: config.damping.get(&Estimator::Eiga).copied(), max_iter: config.max_iter, tol: config.tol, nu_init: None };
    let result = solver.run(&options)?;
    let residuals = fixed_point_residuals(&result, op, &obs.y, &prior)?;
    let report = json!({
        "snr_db": snr,
        "noise_var": noise_var,
        "virtual_noise_var": prior.virtual_noise_var,
        "nu_star": nu_star,
        "beta_star": beta,
        "nu_identity_residual": identity_residual,
        "eiga": {
            "damping": result.damping,
            "iterations": result.iterations,
            "converged": result.converged,
            "residuals": residuals,
        },
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Bounds(a) => bounds(a),
        Command::Probe(a) => probe(a),
        Command::FixedPoint(a) => fixed_point(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::AllTrialsFailed { .. } => ExitCode::from(3),
                ref e if is_config_error(e) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
