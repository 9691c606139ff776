//! Deterministic derivation of independent sub-seeds from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `base` and a stream tag; distinct tags give
/// statistically independent seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named sub-streams, so call sites read `derive(seed, Stream::Crops, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Scenes = 2,
    Crops = 3,
    Batches = 4,
    Distortion = 5,
    Certainty = 6,
    Selection = 7,
    Split = 8,
}

pub fn derive(base: u64, stream: Stream, index: u64) -> u64 {
    derive_seed(derive_seed(base, stream as u64), index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
