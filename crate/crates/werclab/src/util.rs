//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows through a ChaCha8 stream whose
//! seed is derived from a base seed plus purpose tags, so runs replay
//! bitwise regardless of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates consecutive tag values.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with an ordered list of purpose tags. The rotation
/// keeps the accumulator side distinct from the tag side.
pub fn mix_seed(base: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(base ^ 0xa076_1d64_78bd_642f);
    for &t in tags {
        acc = splitmix(acc.rotate_left(29) ^ splitmix(t));
    }
    acc
}

/// Stable FNV-1a hash for seeding by name.
pub fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, tags))
}
