//! Seed derivation. Every stochastic step draws from a ChaCha stream whose
//! seed is a hash of the master seed, a stream tag and an index, so results
//! do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod streams {
    pub const UNIFORM: u64 = 1;
    pub const BALANCED_NEG: u64 = 2;
    pub const BALANCED_POS: u64 = 3;
    pub const DYNAMICS: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const PARAMS: u64 = 6;
    pub const INIT: u64 = 7;
    pub const GA: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const CERTIFY: u64 = 10;
}
