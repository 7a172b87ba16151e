//! Seed fan-out. Every random stream is `ChaCha8` seeded with
//! `root ^ fnv1a64(purpose)`, so one root seed drives the whole run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a64(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    root ^ fnv1a64(purpose)
}

pub fn stream(root: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose))
}
