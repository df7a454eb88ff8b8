//! Deterministic random-number streams.
//!
//! Every stochastic stage of the pipeline (trajectory simulation, parameter
//! initialization, window sampling, ensemble perturbations) draws from its
//! own named stream derived from a single master seed.  Streams are
//! independent of each other and of the order in which stages run, so any
//! stage can be re-executed in isolation and produce bitwise-identical
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// 64-bit FNV-1a hash of a byte string.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer; scrambles the combined seed so that related master
/// seeds (for example 0 and 1) still yield unrelated streams.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the child seed for a named stream from the master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()))
}

/// Creates the deterministic random stream identified by `(master, tag)`.
pub fn stream(master: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag))
}

/// Draws `n` independent standard-normal samples; `n == 0` yields an empty
/// vector without touching the generator.
pub fn gaussian_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(StandardNormal.sample(rng));
    }
    out
}
