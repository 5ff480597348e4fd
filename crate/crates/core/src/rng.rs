//! Seeded random streams.
//!
//! Every random draw in the samplers comes from a stream identified by the
//! root seed plus a short tuple of tags (purpose, time index, particle
//! index, ...). Streams are derived by a splitmix64 chain over the tuple, so
//! a given tuple always yields the same stream regardless of how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const RESAMPLE: u64 = 2;
    pub const MOVE: u64 = 3;
    pub const FIT: u64 = 4;
    pub const PF: u64 = 5;
    pub const PMMH: u64 = 6;
    pub const REBUILD: u64 = 7;
    pub const DATA: u64 = 8;
    pub const PERMUTATION: u64 = 9;
    pub const KDE: u64 = 10;
    pub const REPLICATION: u64 = 11;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of `(seed, tags...)`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, tags))
}
