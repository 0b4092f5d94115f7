//! Deterministic seed derivation.
//!
//! Every stochastic task (chain, replicate, held-out refit) receives its own
//! substream derived from the master seed and the task's coordinates, so
//! outputs never depend on execution order or worker count.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags keeping unrelated substreams disjoint.
pub mod stream {
    pub const CHAIN: u64 = 0x01;
    pub const REPLICATE: u64 = 0x02;
    pub const HELD_OUT: u64 = 0x03;
    pub const SCENARIO: u64 = 0x04;
    pub const DIRECT_DRAWS: u64 = 0x05;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with task coordinates into a new 64-bit seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(master ^ 0x5851_f42d_4c95_7f2d);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// Stable 64-bit content hash (FNV-1a), for seeding by configuration text.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded, portable RNG used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
