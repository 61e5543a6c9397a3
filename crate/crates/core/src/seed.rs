//! Seed derivation. Every random stream in the simulator is derived from the
//! experiment seed plus a fixed path of tags, so no stream depends on the
//! order in which clients happen to execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_SELECT: u64 = 2;
pub(crate) const TAG_HEAD: u64 = 3;
pub(crate) const TAG_EPOCH: u64 = 4;
pub(crate) const TAG_PROFILE: u64 = 5;
pub(crate) const TAG_DATA: u64 = 6;
pub(crate) const TAG_EDGE: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}
