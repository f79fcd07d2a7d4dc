//! Deterministic named RNG substreams.
//!
//! All randomness flows from a single root seed through named substreams
//! (e.g. `"augment/epoch=3/scene=12"`), so enabling one randomized feature
//! never perturbs the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, fixed here so substream derivation is stable across platforms
/// and Rust versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a substream RNG from a root seed and a stream name.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a(&seed.to_le_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
