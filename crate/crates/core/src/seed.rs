//! Deterministic seed derivation.
//!
//! Every random stage of an experiment gets its own generator whose seed
//! is a pure function of `(master_seed, trial_index, tag)`:
//!
//! ```text
//! mix64(z)      = SplitMix64 finalizer of z + 0x9E3779B97F4A7C15
//! fnv1a64(tag)  = 64-bit FNV-1a of the tag's UTF-8 bytes
//! stage_seed    = mix64(mix64(mix64(master) ^ trial) ^ fnv1a64(tag))
//! derive(b, i)  = mix64(b ^ mix64(i))
//! ```
//!
//! Seeds feed a ChaCha8 generator (`rand_chacha::ChaCha8Rng::seed_from_u64`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Child seed `index` of `base` (restart streams, per-machine streams).
pub fn derive(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index))
}

pub fn stage_seed(master: u64, trial: u64, tag: &str) -> u64 {
    mix64(mix64(mix64(master) ^ trial) ^ fnv1a64(tag.as_bytes()))
}

pub fn rng_from(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(master: u64, trial: u64, tag: &str) -> StageRng {
    rng_from(stage_seed(master, trial, tag))
}
