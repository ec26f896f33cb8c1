//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed mixed with a path of integer tags, so independent
//! consumers (chains, measurements, ensemble members) never share a stream
//! and results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags, kept in one place so derivations stay collision-free.
pub mod stream {
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const CHAIN: u64 = 0x4348_4149;
    pub const MEASURE: u64 = 0x4d45_4153;
    pub const PRESCAN: u64 = 0x5052_4553;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const MEMBER: u64 = 0x4d45_4d42;
    pub const PHANTOM: u64 = 0x5048_414e;
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const BENCH: u64 = 0x4245_4e43;
    pub const STEP: u64 = 0x5354_4550;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tags: &[u64]) -> Rng {
    rng(derive_seed(base, tags))
}
