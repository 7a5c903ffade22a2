//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 stream cipher keyed by
//! a 64-bit seed and addressed by a 64-bit stream id (`ChaCha20Rng::set_stream`).
//! ChaCha20 is counter-based, so any implementation of the same cipher
//! reproduces a stream from `(seed, stream_id)` alone.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids used by the model builders. Harness trials fold a trial index
/// into the low 32 bits via [`stream_id`].
pub mod streams {
    pub const POWER: u64 = 1;
    pub const CHANNEL: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const OPERATOR: u64 = 4;
    pub const POWER_ITERATION: u64 = 5;
}

pub fn stream_id(purpose: u64, index: u64) -> u64 {
    (purpose << 32) | (index & 0xffff_ffff)
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// One draw from CN(0, var): real and imaginary parts are each N(0, var/2).
pub fn complex_gaussian<R: rand::Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

pub fn complex_gaussian_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, var: f64) -> Vec<Complex64> {
    (0..n).map(|_| complex_gaussian(rng, var)).collect()
}
