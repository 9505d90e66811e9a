//! Seed derivation. Every random stream in the crate (synthesis, init,
//! shuffling, dropout, k-means) is a ChaCha8 generator seeded from a base
//! seed and a stream tag, so components never share or perturb each other's
//! sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix(mix(base) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(base: u64, tag: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tag))
}

/// Stream tags.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const SYNTH: u64 = 5;
}
