//! Deterministic random streams.
//!
//! Every stochastic choice draws from a ChaCha stream keyed by the global seed
//! plus a path of integers (realization index, iteration, particle, ...), so
//! results never depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const REALIZATION: u64 = 0x7265_616c;
    pub const HARD_DATA: u64 = 0x6861_7264;
    pub const SCHEDULE: u64 = 0x7363_6864;
    pub const PROXY_INIT: u64 = 0x696e_6974;
    pub const PSO_PARTICLE: u64 = 0x7061_7274;
    pub const PSO_TOPOLOGY: u64 = 0x746f_706f;
    pub const MEASUREMENT: u64 = 0x6d65_6173;
    pub const RML: u64 = 0x726d_6c00;
    pub const CLRM: u64 = 0x636c_726d;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of stream coordinates into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
