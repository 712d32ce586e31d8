//! Deterministic seed derivation.
//!
//! Every random stream in a run (initialization, shuffling, binarization,
//! noise, per-item evaluation) is keyed off the run seed plus a short path of
//! integers, so streams never depend on the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `seed`.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags used with [`derive`].
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const BINARIZE: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const TEST_BINARIZE: u64 = 5;
    pub const ITEM_CHAIN: u64 = 6;
    pub const ITEM_ESTIMATE: u64 = 7;
    pub const TOY: u64 = 8;
    pub const GENERATE: u64 = 9;
}
