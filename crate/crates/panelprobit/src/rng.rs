//! Deterministic stream derivation.
//!
//! Every random draw in the sampler comes from a ChaCha8 stream keyed by
//! (seed, tag, unit...) through a splitmix64-style mixer. Parallel and
//! sequential execution therefore produce bit-identical chains: the stream a
//! unit uses depends only on its identity, never on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gibbs-step tags, one per conditional in the fixed sweep order.
pub mod tag {
    pub const CHAIN: u64 = 0x01;
    pub const INIT: u64 = 0x02;
    pub const Y_STAR: u64 = 0x03;
    pub const U: u64 = 0x04;
    pub const V: u64 = 0x05;
    pub const W: u64 = 0x06;
    pub const BETA: u64 = 0x07;
    pub const SIGMA_U: u64 = 0x08;
    pub const SIGMA_V: u64 = 0x09;
    pub const SIGMA_W: u64 = 0x0a;
    pub const RHO: u64 = 0x0b;
    pub const SIMULATE: u64 = 0x0c;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; full-avalanche mix of one word.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a sequence of words into one well-mixed seed.
#[inline]
pub fn derive_seed(base: u64, words: &[u64]) -> u64 {
    let mut s = mix(base);
    for &w in words {
        s = mix(s ^ w.wrapping_mul(GOLDEN));
    }
    s
}

/// Independent ChaCha8 stream for one (seed, tags...) coordinate.
#[inline]
pub fn substream(base: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, words))
}
