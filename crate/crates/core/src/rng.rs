//! Seed derivation shared by every stochastic component.
//!
//! All randomness flows from a global seed through [`derive_seed`], so a
//! component's stream depends only on `(seed, stream id)` and never on call
//! order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ mix(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

// Named stream tags keep unrelated consumers of one seed apart.
pub(crate) const STREAM_ANCHORS: u64 = 0x414e_4348;
pub(crate) const STREAM_POSE: u64 = 0x504f_5345;
pub(crate) const STREAM_DEMO: u64 = 0x4445_4d4f;
pub(crate) const STREAM_MASK: u64 = 0x4d41_534b;
pub(crate) const STREAM_LOAD: u64 = 0x4c4f_4144;
pub(crate) const STREAM_DEPTH: u64 = 0x4445_5054;
pub(crate) const STREAM_EPISODE: u64 = 0x4550_4953;
pub(crate) const STREAM_INIT: u64 = 0x494e_4954;
pub(crate) const STREAM_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const STREAM_SPLIT: u64 = 0x5350_4c54;
pub(crate) const STREAM_TASK: u64 = 0x5441_534b;
