//! Seed derivation for independent deterministic RNG streams.
//!
//! Every randomized component (shuffles, dropout masks, rollout sampling,
//! MC-dropout passes) draws from its own stream derived from a base seed, so
//! results do not depend on evaluation order or thread scheduling.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; bijective on u64.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for sub-stream `stream` of `base`.
pub fn derive(base: u64, stream: u64) -> u64 {
    mix(base ^ mix(stream))
}

/// Seed for a two-level sub-stream, e.g. (sample, step).
pub fn derive2(base: u64, a: u64, b: u64) -> u64 {
    derive(derive(base, a), b)
}
