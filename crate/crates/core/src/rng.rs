//! Deterministic seed derivation.
//!
//! Every randomized component draws from its own named stream so that adding
//! or removing one consumer never shifts the draws seen by another. A stream
//! seed is derived from the base seed and a purpose tag: the tag is hashed
//! with FNV-1a, XORed into the base, and the result is whitened through one
//! SplitMix64 round before seeding ChaCha8.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a stream seed from a base seed and a purpose tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    splitmix64(base ^ fnv1a(tag.as_bytes()))
}

/// Constructs the ChaCha8 stream for a purpose tag.
pub fn stream(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}
