//! Named seed derivation.
//!
//! All randomness in a run flows from one root seed. Each consumer asks for
//! a stream by name (and optional indices), so two runs that differ in one
//! factor share every other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a child seed from `root`, a stream name and a path of indices.
pub fn derive(root: u64, label: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ fnv1a(label));
    for &p in path {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn rng(root: u64, label: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, path))
}
