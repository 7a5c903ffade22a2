//! Matrix-free information-geometry inference for linear-Gaussian models
//! `y = A h + z` with diagonal Gaussian priors.
//!
//! * [`model`]: problem construction (power profiles, priors, channels, observations)
//! * [`operator`]: dense and FFT-structured measurement operators, spectral bounds
//! * [`iga`]: the reference per-observation information-geometry algorithm
//! * [`eiga`]: the efficient common-parameter algorithm
//! * [`oracle`]: dense ground truth (MMSE posterior, closed-form fixed points)
//! * [`analysis`]: iteration-matrix spectra, fixed-point residuals, asymptotic probes
//! * [`harness`]: Monte-Carlo NMSE experiments and their output files

// NaN must fail validation, so `!(x > 0.0)` is used deliberately throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod eiga;
pub mod error;
pub mod harness;
pub mod iga;
pub mod linalg;
pub mod model;
pub mod operator;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
pub use num_complex::Complex64;
