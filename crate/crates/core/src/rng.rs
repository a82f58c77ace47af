//! Seeded random streams. Every consumer draws from its own ChaCha stream so
//! that, e.g., dropout masks never perturb the minibatch order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Reparameterization noise (VI ε, SGLD noise) during training.
pub const TRAIN_NOISE_STREAM: u64 = 0x7261_6e64_0001;
/// Dropout masks during MC-Dropout training.
pub const MASK_STREAM: u64 = 0x7261_6e64_0002;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Independent sub-seed for component `index` of a run seeded with `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    stream(master, 0x7365_6564_0000 + index).next_u64()
}

pub fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
