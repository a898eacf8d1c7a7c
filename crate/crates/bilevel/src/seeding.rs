//! Deterministic random-stream derivation.
//!
//! Every random quantity in the toolkit is drawn from a ChaCha8 generator
//! whose seed is derived from a master seed plus a tag path through a
//! SplitMix64-style mixer. A stream is therefore addressed by
//! `(master_seed, tags...)` and is bit-reproducible across platforms and
//! across any parallel execution order.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Tag for per-sample Gaussian perturbation streams: `(seed, PERTURBATION, j)`.
pub const TAG_PERTURBATION: u64 = 0x01;
/// Tag for the inner minibatch path stream: `(seed, INNER_BATCH)`.
pub const TAG_INNER_BATCH: u64 = 0x02;
/// Tag for the outer minibatch stream: `(seed, OUTER_BATCH)`.
pub const TAG_OUTER_BATCH: u64 = 0x03;
/// Tag for per-outer-iteration estimator seeds: `(seed, ITERATION, k)`.
pub const TAG_ITERATION: u64 = 0x04;
/// Tag for per-trial streams in statistical probes: `(seed, TRIAL, t)`.
pub const TAG_TRIAL: u64 = 0x05;
/// Tag for dataset / problem generation: `(seed, DATA)`.
pub const TAG_DATA: u64 = 0x06;
/// Tag for the initial outer iterate: `(seed, INIT)`.
pub const TAG_INIT: u64 = 0x07;

/// SplitMix64 finalizer.
fn mix(v: u64) -> u64 {
    let mut z = v.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a substream seed from a master seed and a tag path.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut acc = mix(master);
    for &tag in tags {
        acc = mix(acc ^ mix(tag));
    }
    acc
}

/// Seeded generator for the stream addressed by `(master, tags...)`.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Vector of i.i.d. standard normal entries drawn in index order.
pub fn gaussian_vector<T: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> Array1<T> {
    Array1::from_iter((0..len).map(|_| T::standard_normal(rng)))
}
