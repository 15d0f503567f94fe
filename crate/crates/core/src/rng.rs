//! Seeded deterministic random number generation.
//!
//! Every stochastic step in the toolkit draws from a `Xoshiro256PlusPlus`
//! generator seeded through splitmix64, so a `u64` seed fully determines the
//! stream. Independent streams are derived by mixing a tag into the seed.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256PlusPlus as Rng;

/// Generator for `seed`, expanded through splitmix64.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Generator for a named sub-stream of `seed`.
pub fn stream(seed: u64, tag: u64) -> Rng {
    Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
}

/// Stream tags, kept distinct so that e.g. data generation and weight
/// initialisation never share draws.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SCORE_SUBSAMPLE: u64 = 4;
    pub const RANDOM_LAYER: u64 = 5;
    pub const CORRUPT: u64 = 6;
    pub const LATENCY_BATCH: u64 = 7;
    pub const JITTER: u64 = 8;
}
