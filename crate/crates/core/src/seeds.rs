//! Sub-seed derivation.
//!
//! Every random decision in an experiment is drawn from a `ChaCha8Rng` whose
//! seed is derived from the single experiment seed, a role tag, and up to two
//! context values (worker index, round or epoch). The derivation is
//! `mix(mix(mix(seed ^ role) ^ a) ^ b)` with a splitmix64 finalizer, so
//! distinct roles and contexts land in uncorrelated streams while the whole
//! experiment stays reproducible from one integer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags separating the independent random streams of one experiment.
pub mod role {
    pub const MODEL_INIT: u64 = 0x4d4f_4445_4c49_4e49; // model weights
    pub const TEACHER: u64 = 0x5445_4143_4845_5200; // synthetic teacher weights
    pub const FEATURES: u64 = 0x4645_4154_5552_4553; // synthetic feature matrix
    pub const LABEL_NOISE: u64 = 0x4c41_4245_4c4e_4f49; // label resampling
    pub const PARTITION: u64 = 0x5041_5254_4954_494f; // shard permutation
    pub const BATCH: u64 = 0x4241_5443_4853_4844; // per (worker, epoch) shuffles
    pub const EXPLORER: u64 = 0x4558_504c_4f52_4552; // per (worker, round) sampling
    pub const QUANT: u64 = 0x5155_414e_5449_5a45; // per (worker, round) dithering
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from the experiment seed, a role tag, and two context values.
pub fn derive(seed: u64, role: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ role) ^ a) ^ b)
}

/// Deterministic RNG for a derived sub-seed.
pub fn rng(seed: u64, role: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, role, a, b))
}
