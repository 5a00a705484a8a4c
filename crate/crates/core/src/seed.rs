//! Deterministic per-component seed derivation. A master seed is split by
//! (label, index) so that toggling one component does not shift the
//! randomness consumed by others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn derive(master: u64, label: &str, idx: u64) -> u64 {
    splitmix64(master ^ fnv1a(label.as_bytes()).wrapping_add(splitmix64(idx)))
}

pub fn component_rng(master: u64, label: &str, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, label, idx))
}
