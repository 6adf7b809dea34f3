//! Deterministic random number generation.
//!
//! Everything stochastic in the crate draws from ChaCha12 streams derived
//! from a single run seed. Stream numbers separate concerns (sampling,
//! annealing restarts, subsampling) so results are reproducible bit for bit
//! regardless of thread count or call order across platforms.

use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::math;

/// The RNG used throughout; ChaCha12 is deterministic across platforms.
pub type Rng = ChaCha12Rng;

/// RNG for a given seed and purpose stream.
///
/// Distinct streams yield independent sequences, so components can draw in
/// any order (or on any thread) without interfering with one another.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw strictly inside (0, 1), from the top 53 bits.
#[inline]
pub fn uniform01(rng: &mut Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Uniform draw on [lo, hi).
#[inline]
pub fn uniform_in(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal draw via the inverse CDF.
///
/// Inverse-CDF sampling consumes exactly one uniform per draw, which keeps
/// streams aligned when code paths are reordered.
#[inline]
pub fn standard_normal(rng: &mut Rng) -> f64 {
    math::normal_quantile(uniform01(rng))
}

/// Vector of independent standard normal draws.
pub fn standard_normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

/// Uniform draw on the unit sphere in `dim` dimensions.
pub fn uniform_sphere(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = standard_normal_vec(rng, dim);
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Uniform index in [0, n).
#[inline]
pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    // Rejection-free since n is tiny relative to 2^64; bias is negligible.
    (rng.next_u64() % n as u64) as usize
}

/// Fisher-Yates subsample of `k` indices from [0, n) without replacement.
pub fn sample_indices(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + uniform_index(rng, n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
