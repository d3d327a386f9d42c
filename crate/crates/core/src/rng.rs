//! Seed derivation for independent random streams.
//!
//! Every random decision in a run draws from a stream keyed by the master
//! seed plus a purpose tag and the round/client coordinates, so results do
//! not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 0x01;
pub const PARTITION: u64 = 0x02;
pub const SAMPLE_CLIENTS: u64 = 0x03;
pub const SHUFFLE: u64 = 0x04;
pub const LOCAL: u64 = 0x05;
pub const BLOBS: u64 = 0x06;
pub const SYNTHETIC: u64 = 0x07;
pub const CROSS_ORDER: u64 = 0x08;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of tags into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
