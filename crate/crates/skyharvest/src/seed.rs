//! Seed derivation for the many independent random streams in a run.
//!
//! Every component (environment, learner, PSO, ...) owns its own
//! `ChaCha8Rng` seeded from the master experiment seed plus a stream tag,
//! so adding or reordering one consumer never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed, a stream tag, and an index.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(master);
    for &b in tag.as_bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index)
}

/// Seeded rng for a named stream.
pub fn rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}
