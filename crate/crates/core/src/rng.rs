//! Seed derivation and complex Gaussian sampling.
//!
//! Every random stream in a run is derived statelessly from the master seed
//! and a small tuple of indices, so trial results do not depend on execution
//! order or worker count.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a path of indices.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(parent), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Circularly-symmetric complex normal sample with the given total variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Stream tags keep sibling streams of one parent seed apart.
pub mod tags {
    pub const SCENE: u64 = 1;
    pub const ACTIVITY: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const PAYLOAD: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const TRAINING: u64 = 6;
    pub const TRIAL: u64 = 7;
}
