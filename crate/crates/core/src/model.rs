//! Linear-Gaussian problem construction: sparse beam-domain power profiles,
//! extraction of the nonzero-variance coefficients, channel draws and noisy
//! observations `y = A h + z`.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eiga::virtual_noise;
use crate::error::{invalid, Error, Result};
use crate::operator::LinearOperator;
use crate::rng::{self, streams};

/// Per-variable powers of the pre-extraction coefficient vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    pub full_dim: usize,
    pub powers: Vec<f64>,
    pub cluster_seed: u64,
}

impl PowerSpec {
    pub fn new(powers: Vec<f64>, cluster_seed: u64) -> Result<Self> {
        let spec = PowerSpec { full_dim: powers.len(), powers, cluster_seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.powers.len() != self.full_dim || self.full_dim == 0 {
            return Err(invalid!("power vector length {} does not match full_dim {}", self.powers.len(), self.full_dim));
        }
        if self.powers.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid!("powers must be finite and nonnegative"));
        }
        if self.nonzero_count() == 0 {
            return Err(invalid!("power profile has no nonzero entry"));
        }
        Ok(())
    }

    pub fn nonzero_count(&self) -> usize {
        self.powers.iter().filter(|&&p| p > 0.0).count()
    }

    pub fn support(&self) -> Vec<usize> {
        self.powers.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i).collect()
    }
}

/// Draws a clustered power profile: `n_clusters` runs of `cluster_width`
/// consecutive positive entries, everything else zero.
///
/// Runs are separated by at least one zero whenever there is room for it.
/// Powers are log-uniform on [0.1, 10] and rescaled to unit mean.
pub fn generate_power_spec(full_dim: usize, n_clusters: usize, cluster_width: usize, seed: u64) -> Result<PowerSpec> {
    if full_dim == 0 || n_clusters == 0 || cluster_width == 0 {
        return Err(invalid!("dimensions must be positive"));
    }
    let covered = n_clusters
        .checked_mul(cluster_width)
        .filter(|&c| c <= full_dim)
        .ok_or_else(|| invalid!("{n_clusters} clusters of width {cluster_width} do not fit in {full_dim}"))?;

    let mut rng = rng::stream(seed, streams::POWER);
    let slack = full_dim - covered;
    // gaps[0] leads, gaps[n_clusters] trails, the rest sit between runs
    let mut gaps = vec![0usize; n_clusters + 1];
    let mut free = slack;
    if slack >= n_clusters - 1 {
        for g in gaps.iter_mut().take(n_clusters).skip(1) {
            *g = 1;
        }
        free -= n_clusters - 1;
    }
    for _ in 0..free {
        gaps[rng.random_range(0..=n_clusters)] += 1;
    }

    let (lo, hi) = (0.1f64.ln(), 10.0f64.ln());
    let mut powers = vec![0.0; full_dim];
    let mut pos = 0;
    for gap in &gaps[..n_clusters] {
        pos += gap;
        for p in &mut powers[pos..pos + cluster_width] {
            *p = rng.random_range(lo..hi).exp();
        }
        pos += cluster_width;
    }
    let mean = powers.iter().sum::<f64>() / covered as f64;
    for p in &mut powers {
        *p /= mean;
    }
    Ok(PowerSpec { full_dim, powers, cluster_seed: seed })
}

/// Diagonal Gaussian prior `h ~ CN(0, D)` together with the true and the
/// virtual noise variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorModelRaw")]
pub struct PriorModel {
    pub dim: usize,
    pub variances: Vec<f64>,
    pub noise_var: f64,
    pub virtual_noise_var: f64,
}

#[derive(Deserialize)]
struct PriorModelRaw {
    dim: usize,
    variances: Vec<f64>,
    noise_var: f64,
    virtual_noise_var: f64,
}

impl TryFrom<PriorModelRaw> for PriorModel {
    type Error = Error;

    fn try_from(raw: PriorModelRaw) -> Result<Self> {
        if raw.dim != raw.variances.len() {
            return Err(invalid!("dim {} does not match {} variances", raw.dim, raw.variances.len()));
        }
        PriorModel::new(raw.variances, raw.noise_var, raw.virtual_noise_var)
    }
}

impl PriorModel {
    pub fn new(variances: Vec<f64>, noise_var: f64, virtual_noise_var: f64) -> Result<Self> {
        if variances.is_empty() {
            return Err(invalid!("prior must have at least one variable"));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid!("prior variances must be positive and finite"));
        }
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(invalid!("noise variance must be positive, got {noise_var}"));
        }
        if !(virtual_noise_var > 0.0 && virtual_noise_var <= noise_var) {
            return Err(invalid!("virtual noise variance {virtual_noise_var} must lie in (0, {noise_var}]"));
        }
        Ok(PriorModel { dim: variances.len(), variances, noise_var, virtual_noise_var })
    }

    /// Prior whose virtual noise equals the true noise.
    pub fn uncalibrated(variances: Vec<f64>, noise_var: f64) -> Result<Self> {
        Self::new(variances, noise_var, noise_var)
    }

    pub fn with_virtual_noise(&self, virtual_noise_var: f64) -> Result<Self> {
        Self::new(self.variances.clone(), self.noise_var, virtual_noise_var)
    }

    pub fn trace(&self) -> f64 {
        self.variances.iter().sum()
    }
}

/// Restricts `spec` to its support and attaches the noise model. Returns the
/// prior and the (sorted) extraction indices into the full layout.
pub fn build_prior(spec: &PowerSpec, noise_var: f64, n_obs: usize, calibrate_virtual_noise: bool) -> Result<(PriorModel, Vec<usize>)> {
    spec.validate()?;
    if n_obs == 0 {
        return Err(invalid!("need at least one observation"));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(invalid!("noise variance must be positive, got {noise_var}"));
    }
    let indices = spec.support();
    let variances: Vec<f64> = indices.iter().map(|&i| spec.powers[i]).collect();
    let virtual_var = if calibrate_virtual_noise { virtual_noise(noise_var, &variances, n_obs)? } else { noise_var };
    Ok((PriorModel::new(variances, noise_var, virtual_var)?, indices))
}

pub fn sample_channel(prior: &PriorModel, seed: u64) -> Vec<Complex64> {
    let mut rng = rng::stream(seed, streams::CHANNEL);
    prior.variances.iter().map(|&v| rng::complex_gaussian(&mut rng, v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: Vec<Complex64>,
    pub n_obs: usize,
}

impl Observation {
    pub fn new(y: Vec<Complex64>) -> Self {
        let n_obs = y.len();
        Observation { y, n_obs }
    }
}

/// `y = A h + z` with `z ~ CN(0, noise_var I)`.
pub fn observe<O: LinearOperator + ?Sized>(op: &O, h: &[Complex64], noise_var: f64, seed: u64) -> Result<Observation> {
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(invalid!("noise variance must be nonnegative, got {noise_var}"));
    }
    let mut y = op.apply(h)?;
    let mut rng = rng::stream(seed, streams::NOISE);
    for yi in &mut y {
        *yi += rng::complex_gaussian(&mut rng, noise_var);
    }
    Ok(Observation::new(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::DenseOperator;

    fn runs(powers: &[f64]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < powers.len() {
            if powers[i] > 0.0 {
                let s = i;
                while i < powers.len() && powers[i] > 0.0 {
                    i += 1;
                }
                out.push((s, i - s));
            } else {
                i += 1;
            }
        }
        out
    }

    #[test]
    fn full_support_profile() {
        let spec = generate_power_spec(8, 1, 8, 0).unwrap();
        assert_eq!(spec.nonzero_count(), 8);
        assert!(spec.powers.iter().all(|&p| p > 0.0));
        let mean = spec.powers.iter().sum::<f64>() / 8.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clustered_profile_has_separate_runs() {
        let spec = generate_power_spec(64, 2, 4, 1).unwrap();
        assert_eq!(spec.nonzero_count(), 8);
        let r = runs(&spec.powers);
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|&(_, w)| w == 4));
        assert_eq!(spec, generate_power_spec(64, 2, 4, 1).unwrap());
        assert_ne!(spec.powers, generate_power_spec(64, 2, 4, 2).unwrap().powers);
    }

    #[test]
    fn oversized_clusters_rejected() {
        assert!(matches!(generate_power_spec(10, 3, 4, 0), Err(Error::InvalidArgument(_))));
        assert!(generate_power_spec(10, 0, 4, 0).is_err());
    }

    #[test]
    fn extraction_by_support() {
        let spec = PowerSpec::new(vec![0.0, 2.0, 0.0, 3.0], 0).unwrap();
        let (prior, idx) = build_prior(&spec, 1.0, 4, false).unwrap();
        assert_eq!(idx, vec![1, 3]);
        assert_eq!(prior.variances, vec![2.0, 3.0]);
        assert_eq!(prior.virtual_noise_var, 1.0);
    }

    #[test]
    fn calibrated_virtual_noise() {
        // f(x) = x - 1/(1/2 + (N-1)/x); N = 3 gives 1 - 2/5 = 0.6, N = 2 gives 1 - 2/3
        let spec = PowerSpec::new(vec![2.0], 0).unwrap();
        let (p3, _) = build_prior(&spec, 1.0, 3, true).unwrap();
        assert!((p3.virtual_noise_var - 0.6).abs() < 1e-15);
        let (p2, _) = build_prior(&spec, 1.0, 2, true).unwrap();
        assert!((p2.virtual_noise_var - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn calibration_needs_more_observations_than_variables() {
        let spec = PowerSpec::new(vec![1.0, 1.0], 0).unwrap();
        assert!(matches!(build_prior(&spec, 1.0, 2, true), Err(Error::Unsupported(_))));
        assert!(build_prior(&spec, 1.0, 2, false).is_ok());
    }

    #[test]
    fn all_zero_profile_rejected() {
        assert!(PowerSpec::new(vec![0.0; 4], 0).is_err());
        let spec = PowerSpec { full_dim: 3, powers: vec![0.0; 3], cluster_seed: 0 };
        assert!(build_prior(&spec, 1.0, 4, false).is_err());
    }

    #[test]
    fn prior_invariants() {
        assert!(PriorModel::new(vec![1.0, 0.0], 1.0, 1.0).is_err());
        assert!(PriorModel::new(vec![1.0], 1.0, 1.5).is_err());
        assert!(PriorModel::new(vec![1.0], 0.0, 0.0).is_err());
        let p = PriorModel::new(vec![1.0, 2.0], 1.0, 0.5).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PriorModel>(&s).unwrap(), p);
        let bad = r#"{"dim":1,"variances":[-1.0],"noise_var":1.0,"virtual_noise_var":1.0}"#;
        assert!(serde_json::from_str::<PriorModel>(bad).is_err());
    }

    #[test]
    fn channel_draw_statistics() {
        let prior = PriorModel::uncalibrated(vec![1.0, 1.0], 1.0).unwrap();
        assert_eq!(sample_channel(&prior, 5), sample_channel(&prior, 5));
        let n = 100_000;
        let mut acc = [0.0f64; 2];
        let mut rng = rng::stream(99, streams::CHANNEL);
        for _ in 0..n {
            for a in acc.iter_mut() {
                *a += rng::complex_gaussian(&mut rng, 1.0).norm_sqr();
            }
        }
        for a in acc {
            // |h|^2 ~ Exp(1): std of the mean is 1/sqrt(n)
            assert!((a / n as f64 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn noiseless_observation() {
        let op = DenseOperator::random_unit_modulus(6, 3, 2);
        let h = vec![Complex64::new(1.0, -0.5), Complex64::new(0.2, 0.3), Complex64::new(-1.0, 0.0)];
        let obs = observe(&op, &h, 1e-30, 4).unwrap();
        let clean = op.apply(&h).unwrap();
        let err: f64 = obs.y.iter().zip(&clean).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let nrm: f64 = clean.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!(err <= 1e-12 * nrm);
        assert!(observe(&op, &h[..2], 1.0, 4).is_err());
    }

    #[test]
    fn pure_noise_power() {
        let op = DenseOperator::random_unit_modulus(50, 2, 2);
        let h = vec![Complex64::new(0.0, 0.0); 2];
        let mut total = 0.0;
        for seed in 0..400 {
            let obs = observe(&op, &h, 1.0, seed).unwrap();
            total += obs.y.iter().map(|c| c.norm_sqr()).sum::<f64>() / 50.0;
        }
        assert!((total / 400.0 - 1.0).abs() < 0.03);
    }
}
