//! Deterministic seed splitting.
//!
//! All randomness in the pipeline flows from one root seed. Sub-seeds are
//! derived from the root plus a string label (`derive(root, "teacher/3")`),
//! so every stage — data generation, each parameter's init, each training
//! run — is independently reproducible regardless of execution order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// FNV-1a over the label bytes, folded into the root via splitmix64.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(root ^ h)
}

/// Seeded RNG for a labeled sub-stream of the root seed.
pub fn rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
