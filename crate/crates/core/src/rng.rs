//! Seed derivation and the few distributions the lab samples from.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d4_9bb4_6331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream seed from a base seed and a path of integers such as
/// `(purpose, client, round, epoch)`. Distinct paths give unrelated streams.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn seeded(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels for [`derive_seed`] paths.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const DP: u64 = 4;
    pub const SERVER_ORDER: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const RELAY_ORDER: u64 = 7;
}

/// Uniform on `[0, 1)` with 53 random bits.
pub fn unit_uniform(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Box–Muller pair of independent standard normals.
pub fn normal_pair(rng: &mut dyn RngCore) -> (f64, f64) {
    let u1 = 1.0 - unit_uniform(rng); // (0, 1]
    let u2 = unit_uniform(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

pub fn standard_normal(rng: &mut dyn RngCore) -> f64 {
    normal_pair(rng).0
}

/// Laplace(0, scale) by inverse CDF.
pub fn laplace(rng: &mut dyn RngCore, scale: f64) -> f64 {
    // u in (-1/2, 1/2)
    let mut u = unit_uniform(rng) - 0.5;
    while u == -0.5 {
        u = unit_uniform(rng) - 0.5;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Gaussian sampler that keeps the second Box–Muller variate.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    pub fn gaussian(&mut self, std: f64) -> f64 {
        let z = match self.spare.take() {
            Some(z) => z,
            None => {
                let (a, b) = normal_pair(&mut self.rng);
                self.spare = Some(b);
                a
            }
        };
        std * z
    }

    pub fn laplace(&mut self, scale: f64) -> f64 {
        laplace(&mut self.rng, scale)
    }
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
