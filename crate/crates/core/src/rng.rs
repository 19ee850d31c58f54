//! Seed derivation helpers shared by every randomized stage.
//!
//! All randomness in this crate flows through ChaCha8 streams derived from a
//! caller-supplied seed. A module tag keeps streams from colliding when two
//! modules derive from the same pipeline seed, and a stream index gives each
//! independent consumer (a tree, a trace, an epoch) its own sequence. Parallel
//! and serial execution therefore see identical draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_MODEL_INIT: u64 = 0x6d6f_6465_6c5f_3031; // "model_01"
pub const TAG_TRAIN_SHUFFLE: u64 = 0x7368_7566_666c_6531;
pub const TAG_FOREST: u64 = 0x666f_7265_7374_3031;
pub const TAG_SYNTH_MODEL: u64 = 0x6d61_726b_6f76_3031;
pub const TAG_SYNTH_TRACE: u64 = 0x7472_6163_655f_3031;
pub const TAG_SYNTH_INJECT: u64 = 0x696e_6a65_6374_3031;
pub const TAG_SPLIT: u64 = 0x7370_6c69_745f_3031;

/// splitmix64 finalizer; maps (seed, tag) to a well-mixed 64-bit seed.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha8 generator for `(seed, tag)` on stream `stream`.
pub fn derived_rng(seed: u64, tag: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, tag));
    rng.set_stream(stream);
    rng
}
