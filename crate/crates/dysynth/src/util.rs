//! Seed derivation and stable hashing.
//!
//! Every stochastic component in the pipeline draws from a ChaCha stream seeded
//! through these helpers, so runs are reproducible across platforms and
//! rebuilds. `std::collections::HashMap` hashing is randomized per process and
//! must never leak into anything serialized; these functions are the stable
//! replacement.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte slice, 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates nearby inputs.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed derived from a base seed, a string label and an integer index.
///
/// Used wherever independent per-item RNG streams are needed (per-utterance
/// corpus generation, per-entry augmentation synthesis) so that item order
/// never influences item content.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = fnv1a(label.as_bytes());
    h ^= splitmix64(base);
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    h ^= splitmix64(index ^ 0xA5A5_A5A5_5A5A_5A5A);
    splitmix64(h)
}

/// Deterministic RNG for a derived stream.
pub fn rng_for(base: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, index))
}

/// Uniform value in [0, 1) that depends only on the given text labels.
///
/// Backs the procedural toy corpus: per-phoneme base durations, spectral
/// templates and similar "random but frozen" quantities.
pub fn unit_hash(parts: &[&str]) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        h ^= fnv1a(p.as_bytes());
        h = splitmix64(h);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}
