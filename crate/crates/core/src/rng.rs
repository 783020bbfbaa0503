//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in the toolkit (parameter init, reparameterization
//! noise, Hessian-pair subsampling, dataset shuffling) draws from a child RNG
//! derived from the run seed plus a domain label and integer coordinates. This
//! keeps runs bit-reproducible under a fixed seed and makes checkpoint resume
//! line up with an uninterrupted run: the stream for step t depends only on
//! (seed, t), never on how many draws happened before.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child RNG from a seed, a domain label, and integer coordinates.
pub fn child_rng(seed: u64, domain: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ fnv1a(domain.as_bytes()));
    for &c in coords {
        state = mix(state ^ c);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Stable hash of a parameter name, used as an init-stream coordinate so
/// initialization does not depend on insertion order.
pub fn name_hash(name: &str) -> u64 {
    fnv1a(name.as_bytes())
}
