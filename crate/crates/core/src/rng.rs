//! Seed derivation for independent random streams.
//!
//! Every stream is a `ChaCha8Rng` seeded with `derive_seed(seed, parts)`, where
//! `parts` names the consumer. The sampler uses `[STREAM_CHAIN, superchain,
//! subchain]`; replication, imputation and the simulator use their own tags.
//! Derivation folds each part into a SplitMix64 state, so streams differ in
//! every bit of their seed whenever any part differs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_CHAIN: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_REPLICATE: u64 = 3;
pub const STREAM_IMPUTE: u64 = 4;
pub const STREAM_SIMULATE: u64 = 5;
pub const STREAM_SUBSAMPLE: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    state
}

pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}
