//! Named random substreams.
//!
//! Every random decision in a run (weight init, shuffling, point sampling,
//! data generation) draws from a generator derived from the run seed and a
//! purpose label, so the order in which components ask for randomness never
//! changes what they receive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives a 64-bit seed for `label` from `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    fnv1a(seed, label)
}

pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
