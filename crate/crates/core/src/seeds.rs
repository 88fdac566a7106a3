//! Deterministic seed derivation.
//!
//! Every stochastic stage (path sampling, phase matrices, noise, parameter
//! init, training shuffles, evaluation trials) draws from its own ChaCha
//! stream whose seed is derived from a base seed, a namespace string, and an
//! index. Namespaces keep training and evaluation channels disjoint.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(base, namespace, index)`.
pub fn derive_seed(base: u64, namespace: &str, index: u64) -> u64 {
    let mut h = mix(base ^ 0x517c_c1b7_2722_0a95);
    for &b in namespace.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}

/// RNG for a derived stream.
pub fn stream_rng(base: u64, namespace: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, namespace, index))
}
