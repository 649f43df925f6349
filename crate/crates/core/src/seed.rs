//! Counter-based seed derivation.
//!
//! Every random stream in a simulation is keyed by a path of integers
//! (`master`, then role, point, seed index, node, ...). Streams for existing
//! paths never change when new grid points or roles are added, so grids stay
//! extensible without reshuffling earlier results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known role tags mixed into derived seeds.
pub mod role {
    pub const GROUND_TRUTH: u64 = 0x6774;
    pub const DRIFT: u64 = 0x6472;
    pub const DATA: u64 = 0x6461;
    pub const PROBE: u64 = 0x7072;
    pub const DITHER: u64 = 0x6469;
    pub const CALIBRATION: u64 = 0x6361;
    pub const TEST: u64 = 0x7465;
    pub const SCORE_DITHER: u64 = 0x7364;
    pub const FMAX: u64 = 0x666d;
    pub const INPUT: u64 = 0x696e;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a path of labels.
pub fn derive(parent: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(parent), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// Seeded generator used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
