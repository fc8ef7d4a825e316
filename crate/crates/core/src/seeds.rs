//! Deterministic seed derivation.
//!
//! Every source of randomness in the crate is a [`rand_chacha::ChaCha8Rng`]
//! seeded through this module, so a single master seed reproduces the full
//! run bit-for-bit. Sub-streams are derived by mixing the master seed with
//! a purpose tag and integer coordinates (epoch, step, item), which keeps
//! parallel fan-out deterministic without sharing RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes; stable across platforms.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `master`, a purpose tag, and coordinates.
pub fn derive(master: u64, tag: &str, coords: &[u64]) -> u64 {
    let mut s = mix(master ^ tag_hash(tag));
    for &c in coords {
        s = mix(s ^ c);
    }
    s
}

/// ChaCha8 stream for (`master`, `tag`, `coords`).
pub fn rng(master: u64, tag: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, coords))
}
