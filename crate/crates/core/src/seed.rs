//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a path of
//! small integers (subframe index, stage tag, ...), so two detectors that
//! request the same path see the same draws regardless of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stage tags used when splitting a subframe seed.
pub mod stage {
    pub const DATA: u64 = 1;
    pub const PILOTS: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const RESERVOIR: u64 = 5;
    pub const ATTENTION: u64 = 6;
    pub const STRUCTNET: u64 = 7;
    pub const PRETRAIN: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_from(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}
