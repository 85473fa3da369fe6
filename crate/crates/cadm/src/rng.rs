//! Deterministic RNG stream derivation.
//!
//! Every random decision in the system draws from a ChaCha8 stream whose seed
//! is derived from the run seed plus a path of integer tags (domain label,
//! iteration, trajectory, candidate, ...). Streams are therefore independent
//! of evaluation order and worker count: any consumer can reconstruct exactly
//! the stream it needs from the path alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; the standard constants.
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a domain-label string, usable in consts.
pub const fn tag(label: &str) -> u64 {
    let bytes = label.as_bytes();
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    let mut i = 0;
    while i < bytes.len() {
        hash ^= bytes[i] as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        i += 1;
    }
    hash
}

/// Mix a run seed with a path of tags into one 64-bit stream seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// ChaCha8 stream for the given (seed, path).
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
