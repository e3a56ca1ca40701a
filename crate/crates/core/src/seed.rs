//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from `mix(parent, index)`, so batch items can be produced in any
//! order and still match sequential generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `parent` and an index.
pub fn mix(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named sub-streams of a run seed.
pub mod stream {
    pub const PRETRAIN_DATA: u64 = 1;
    pub const PERMUTATION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BANKS: u64 = 4;
    pub const PROBE_TRAIN: u64 = 5;
    pub const PROBE_EVAL: u64 = 6;
    pub const PROBE_INIT: u64 = 7;
    pub const PROBE_BATCHES: u64 = 8;
    pub const GEN_DATA: u64 = 9;
    pub const BANK_WARMUP: u64 = 10;
}
