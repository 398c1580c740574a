//! Seeding helpers.
//!
//! [`SplitMix64`] is part of the mask contract shared with external feature
//! extractors and must not change. Everything else draws from ChaCha8 streams
//! derived from the run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Steele, Lea and Flood's splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }
}

/// The splitmix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic independent stream for a named purpose under `seed`.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Stream identifiers, kept in one place so two subsystems never share one.
pub mod purpose {
    pub const KMEANS: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const SOURCE_BATCHES: u64 = 3;
    pub const ADAPT_BATCHES: u64 = 4;
    pub const SYNTH_ANCHORS: u64 = 10;
    pub const SYNTH_SOURCE: u64 = 11;
    pub const SYNTH_TARGET: u64 = 12;
    pub const SYNTH_SHIFT: u64 = 13;
    pub const TOY_ENCODER: u64 = 20;
}
