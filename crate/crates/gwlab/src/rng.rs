//! Deterministic RNG stream derivation.
//!
//! All randomness in an experiment flows from one 64-bit seed. A stream is
//! identified by the seed plus a labeled path of u64 components, typically
//! `[KIND, replica, generation]`. Stream derivation is a splitmix64 sponge
//! over the path, expanded into a ChaCha8 key, so distinct paths give
//! independent streams and identical (seed, path) pairs reproduce bit-exactly
//! regardless of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream kind labels (first path component).
pub mod kind {
    pub const FORWARD: u64 = 1;
    pub const SPINE: u64 = 2;
    pub const KESTEN: u64 = 3;
    pub const RETURN_FUNCTIONAL: u64 = 4;
    pub const CONDITION_MC: u64 = 5;
    pub const LAW_CHECK: u64 = 6;
    pub const WITNESS: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the ChaCha8 stream for `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09e667f3bcc908;
    let _ = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(0x2545f4914f6cdd1d);
        let _ = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
