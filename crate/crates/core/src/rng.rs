//! Seed derivation shared by shuffling, augmentation and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed: `mix(mix(mix(global) ^ epoch) ^ index)`.
pub fn sample_seed(global: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(global) ^ epoch) ^ index)
}

/// Seed for a named stream (shuffle, split, init...) so streams never collide.
pub fn stream_seed(global: u64, stream: &str, index: u64) -> u64 {
    let tag = stream
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix64(splitmix64(global ^ tag) ^ index)
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
