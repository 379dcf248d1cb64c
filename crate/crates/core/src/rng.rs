//! Seeded random streams.
//!
//! Every stochastic component takes one master seed. Independent pieces of
//! work (frames, restarts, label draws) get their own ChaCha stream derived
//! from `(seed, domain, index)`, so results do not depend on evaluation order
//! or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_STATES: u64 = 0x5354_4154;
pub const DOMAIN_FRAMES: u64 = 0x4652_414d;
pub const DOMAIN_KMEANS: u64 = 0x4b4d_4e53;
pub const DOMAIN_ANNEAL: u64 = 0x414e_4e4c;
pub const DOMAIN_MEAN_FIELD: u64 = 0x4d46_4c44;
pub const DOMAIN_SPLIT: u64 = 0x5350_4c54;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for item `index` of `domain` under `seed`.
pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}
