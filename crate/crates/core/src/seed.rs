//! Stable seed derivation.
//!
//! `derive_seed(master, label)` hashes the label bytes with 64-bit FNV-1a
//! (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`), XORs the
//! result with the master seed, and finishes with one splitmix64 round
//! (increment `0x9e3779b97f4a7c15`, multipliers `0xbf58476d1ce4e5b9` and
//! `0x94d049bb133111eb`, shifts 30/27/31). Only wrapping integer arithmetic
//! is involved, so values agree on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    splitmix64(fnv1a64(label.as_bytes()) ^ master_seed)
}

/// Seed for the `index`-th member of a family, e.g. identity `i` of a batch.
pub fn derive_indexed(master_seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master_seed, label) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
