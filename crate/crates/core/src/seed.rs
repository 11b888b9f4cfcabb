//! Seed derivation.

use crate::features::fnv1a64;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seed of `base` for stream `tag`.
pub fn derive(base: u64, tag: u64) -> u64 {
    mix64(base ^ mix64(tag))
}

/// Per-episode seed: the global seed xor a 64-bit hash of the query id.
pub fn episode_seed(global: u64, query_id: &str) -> u64 {
    global ^ fnv1a64(query_id.as_bytes())
}
