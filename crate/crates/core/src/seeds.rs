//! Deterministic seed streams.
//!
//! Every random draw in the crate goes through a [`ChaCha8Rng`] seeded from a
//! 64-bit value. Child seeds are derived with a SplitMix64 finalizer so that
//! replicate `i` of a sweep, or bootstrap draw `b` of an estimate, always sees
//! the same stream regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of `parent`. Distinct indices give distinct seeds.
pub fn derive(parent: u64, index: u64) -> u64 {
    // splitmix64 is a bijection, so distinct indices never collide for a
    // fixed parent.
    splitmix64(splitmix64(parent) ^ index)
}

/// Child seed keyed by a stream label and an index.
pub fn derive_labeled(parent: u64, label: &str, index: u64) -> u64 {
    let tag = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    derive(derive(parent, tag), index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
