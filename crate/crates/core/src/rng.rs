//! Seeded random number generation. Every initializer takes an explicit
//! generator; nothing in the crate draws from ambient randomness.

use rand::{RngCore, SeedableRng};

pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut r = SplitMix64::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.next_u64()
}
