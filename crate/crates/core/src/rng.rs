//! Seed handling. Every generator in the crate takes an explicit `u64` seed and
//! derives independent streams from it, so results never depend on call order
//! across modules or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named streams used by the experiment runners.
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const EDITS: u64 = 3;
    pub const CHAIN: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const PAIRS: u64 = 6;
}
