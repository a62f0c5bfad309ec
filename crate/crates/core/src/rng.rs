//! Seed plumbing: one 64-bit seed, sub-streams derived by a fixed counter.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn stream(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

/// Independent seed for sub-task `counter`.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    stream(seed, counter).next_u64()
}

/// Standard complex Gaussian with E|z|² = 1.
pub fn complex_normal<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}
