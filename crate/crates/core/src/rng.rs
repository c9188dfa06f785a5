//! Seeded random streams.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`] keyed with
//! `seed_from_u64` (the PCG32 key expansion documented by `rand_core`).
//! Independent sub-streams are derived with [`derive_seed`], a SplitMix64
//! finalizer over `(seed, tag)`, so results do not depend on platform word
//! size, thread scheduling or call order across runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for a root seed.
pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for the sub-stream `tag` of `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the sub-stream `tag` of `seed`.
pub fn sub_rng(seed: u64, tag: u64) -> Rng {
    rng(derive_seed(seed, tag))
}
