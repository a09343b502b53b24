//! Deterministic seed derivation.
//!
//! A single root seed fans out to per-stage / per-arm seeds through a
//! counter-style mix, so adding a pipeline stage never perturbs the
//! randomness consumed by earlier stages.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; full-period bijective mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` for the given domain tag and index.
pub fn derive(root: u64, domain: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a offset basis
    for b in domain.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(root ^ mix(h) ^ mix(index.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// Seeded RNG used throughout the crate. ChaCha keeps streams identical
/// across platforms and word sizes.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
