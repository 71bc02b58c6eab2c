//! Seed derivation.
//!
//! Every stage draws randomness from its own stream derived from one master
//! seed: the stage name is hashed with 64-bit FNV-1a, xored into the master
//! seed, and the result is passed through one SplitMix64 finalisation round.
//! Stages can therefore be re-run on their own and still see the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the named stage.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    splitmix64(master ^ fnv1a(stage.as_bytes()))
}

/// Deterministic generator for a raw seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic generator for the named stage of a master seed.
pub fn stage_rng(master: u64, stage: &str) -> ChaCha8Rng {
    rng(derive_seed(master, stage))
}
