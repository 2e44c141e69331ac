//! Deterministic random streams.
//!
//! Every stochastic routine takes a caller-supplied generator. When work is
//! fanned out (per example, per restart, per Monte Carlo chunk) each unit gets
//! its own stream derived from a parent seed and a stable id, so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer applied to `seed` combined with `id`.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed
        ^ id.wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derived(seed: u64, id: u64) -> SeededRng {
    seeded(derive_seed(seed, id))
}
