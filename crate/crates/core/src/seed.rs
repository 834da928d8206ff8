//! Seed derivation.
//!
//! Every random stream in the crate descends from one master seed through
//! [`derive_seed`], a splitmix64 mix of the parent seed and a stream tag.
//! Generators are ChaCha8, which is portable and reproducible across
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `stream` under `parent`.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    splitmix64(parent ^ splitmix64(stream))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used across the crate.
pub mod stream {
    pub const WORLD: u64 = 0;
    pub const TRAIN_SPLIT: u64 = 1;
    pub const VAL_SPLIT: u64 = 2;
    pub const TEST_SPLIT: u64 = 3;
    pub const MODEL_INIT: u64 = 10;
    pub const STAGE1: u64 = 11;
    pub const STAGE2: u64 = 12;
    pub const PREDICATE_PLAN: u64 = 20;
    pub const ENTITY_PLAN: u64 = 21;
}
