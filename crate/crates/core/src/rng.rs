//! Deterministic random substreams.
//!
//! Every Monte Carlo quantity in the crate is keyed by a tuple of integers
//! (seed, data point, m, k, ...). The tuple is folded into a 64-bit key with the
//! SplitMix64 finalizer (constants 0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9,
//! 0x94D049BB133111EB) and the key seeds a ChaCha8 generator, so draws depend
//! only on the key and never on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a seed and a path of tags into one key.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |h, &t| splitmix64(h ^ splitmix64(t.wrapping_add(GOLDEN))))
}

pub fn substream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, tags))
}

/// Tags for the different consumers of randomness, so their streams never overlap.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const WEIGHTS: u64 = 5;
    pub const GRAD_SAMPLE: u64 = 6;
    pub const PREDICT: u64 = 7;
    pub const POINTS: u64 = 8;
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

pub fn normal_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    fill_normal(rng, &mut data);
    Tensor::from_vec(rows, cols, data)
}
