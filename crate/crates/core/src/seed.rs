//! Deterministic seed streams. Every random draw in the crate comes from a
//! ChaCha8 generator keyed by `(master seed, stream tags)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STIMULUS: u64 = 1;
pub const RENDER: u64 = 2;
pub const VOXEL: u64 = 3;
pub const RESPONSE: u64 = 4;
pub const DICTIONARY: u64 = 5;
pub const ENCODER_INIT: u64 = 6;
pub const TRAIN: u64 = 7;
pub const SHUFFLE: u64 = 8;
pub const PATCH: u64 = 9;
pub const DECODE: u64 = 10;
pub const RECONSTRUCT: u64 = 11;
pub const DISCRIMINATE: u64 = 12;
pub const EDIT: u64 = 13;
pub const PAIR: u64 = 14;
pub const PROFILE: u64 = 15;
pub const SPLITS: u64 = 16;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of stream tags.
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    stream
        .iter()
        .fold(splitmix64(master), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

pub fn rng_for(master: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}
