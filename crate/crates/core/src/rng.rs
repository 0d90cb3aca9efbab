//! Seed derivation. Every random stream in the toolkit is keyed by a master
//! seed plus a path of integer labels, so results never depend on the order
//! in which members or cycles are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a master seed with one label.
pub fn derive_seed(master: u64, label: u64) -> u64 {
    splitmix64(splitmix64(master) ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Hash a master seed with a path of labels.
pub fn derive_seed_path(master: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(master, |s, &l| derive_seed(s, l))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels, so that unrelated draws keyed by the same integers stay
/// independent.
pub mod label {
    pub const PRIOR: u64 = 1;
    pub const ANALYSIS: u64 = 2;
    pub const GAUGE_NOISE: u64 = 3;
    pub const SWOT: u64 = 4;
    pub const DH_REDRAW: u64 = 5;
}
