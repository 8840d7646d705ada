//! Seeded random streams.
//!
//! Every consumer derives its generator from the run seed and a fixed stream
//! id, so adding a consumer never perturbs another one's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const TRAIN_NOISE: u64 = 1;
    pub const TRAIN_SAMPLE: u64 = 2;
    pub const RESTART: u64 = 3;
    pub const THRESHOLD: u64 = 4;
    pub const SWEEP: u64 = 5;
    pub const BAND: u64 = 6;
    pub const SYNTH_NOISE: u64 = 7;
    pub const HOLDOUT: u64 = 8;
}

/// Generator for `(seed, stream)`. Distinct streams never overlap.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for the `index`-th independent job inside a stream.
pub fn child_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the triple
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
