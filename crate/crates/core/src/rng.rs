//! Seed derivation. Every independent unit of work (an individual, a
//! replication) owns a ChaCha stream derived from the master seed, so serial
//! and parallel execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_TYPES: u64 = 0x7479_7065;
pub const TAG_PANEL: u64 = 0x7061_6e65;
pub const TAG_REPLICATION: u64 = 0x7265_706c;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Stream `index` of the generator keyed by `(seed, tag)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag]));
    rng.set_stream(index);
    rng
}
