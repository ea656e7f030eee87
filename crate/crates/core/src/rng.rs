//! Seed derivation. Every random draw in the simulator comes from a
//! `ChaCha8Rng` whose seed is a pure function of the experiment seed and a
//! set of tags (round, device, purpose), so results never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base` to produce an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept distinct so unrelated draws never share a stream.
pub(crate) mod tag {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const MINIBATCH: u64 = 5;
    pub const CENTERS: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const PARTITION: u64 = 8;
}
