//! Deterministic random-number streams.
//!
//! Every source of randomness in the crate is a [`Stream`] derived from a
//! root seed plus a namespaced list of lane values (trajectory lineage id,
//! task index, judge call, ...). Two properties follow:
//!
//! * identically configured runs are bit-identical, and
//! * creating or pruning one trajectory never advances another trajectory's
//!   stream, so search decisions cannot perturb survivors' randomness.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// The concrete RNG used everywhere in this crate.
pub type Stream = ChaCha8Rng;

/// Lane namespaces used when deriving child streams; keeping these distinct
/// guarantees e.g. a judge call can never replay a trajectory's stream.
pub mod lane {
    /// Per-trajectory decode stream, keyed by lineage id.
    pub const TRAJECTORY: u64 = 0x01;
    /// Simulated-judge noise, keyed by a completion digest.
    pub const JUDGE: u64 = 0x02;
    /// Planted-task generation, keyed by task index.
    pub const TASK: u64 = 0x03;
    /// Sampled verification completions, keyed by (lineage id, step).
    pub const SVF_COMPLETION: u64 = 0x04;
    /// Per-repetition experiment seeds, keyed by repetition index.
    pub const REPETITION: u64 = 0x05;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; good avalanche for cheap seed mixing.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from a root seed and a list of lane values.
pub fn derive_seed(root: u64, lanes: &[u64]) -> u64 {
    let mut acc = mix64(root);
    for &lane in lanes {
        acc = mix64(acc ^ lane.wrapping_mul(GOLDEN));
    }
    acc
}

/// Derives an independent RNG stream from a root seed and lane values.
pub fn stream(root: u64, lanes: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(root, lanes))
}

/// Order-sensitive digest of a token-id sequence, for keying judge noise.
pub fn digest_u32s(values: impl IntoIterator<Item = u32>) -> u64 {
    let mut acc = 0xD1F4_5EED_u64;
    for v in values {
        acc = mix64(acc ^ u64::from(v).wrapping_mul(GOLDEN).wrapping_add(1));
    }
    acc
}
