// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic random streams.
//!
//! Every random draw in the crate flows from one root seed through named
//! substreams, so each stage (weights, scenes, noise) can be regenerated on
//! its own without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Create a deterministic `ChaCha8Rng` from a seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive the seed of a named substream.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer over the mix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

/// RNG for a named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    seeded_rng(substream_seed(seed, name))
}

/// Seed of the `index`-th member of a named substream family.
pub fn indexed_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(substream_seed(seed, name).wrapping_add(index))
}

/// RNG for the `index`-th member of a named substream family.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    seeded_rng(indexed_seed(seed, name, index))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
