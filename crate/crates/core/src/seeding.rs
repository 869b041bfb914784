//! Seed derivation for reproducible batches.
//!
//! Every scenario, noise stream and exploration stream is seeded from a base
//! seed plus a short path of integers, so results do not depend on the order
//! or the thread in which scenarios are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags so that independent uses of one scenario index never share
/// a generator.
pub mod stream {
    pub const SCENARIO: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const TRAIN: u64 = 4;
}
