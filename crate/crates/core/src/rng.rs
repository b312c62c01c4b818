//! Counter-based random streams.
//!
//! Every stochastic component draws from a `ChaCha12` stream addressed by
//! `(seed, tag, index)`. Streams are independent of thread count and of how
//! work is chunked, so any result produced from a seed is bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream tags. One per purpose so that consuming draws in one component
/// never shifts the draws seen by another.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const WEIGHT_INIT: u64 = 3;
    pub const TRAIN_NOISE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const CHAIN: u64 = 6;
    pub const CHAIN_INIT: u64 = 7;
    pub const MEAS_NOISE: u64 = 8;
    pub const RANDOM_BASIS: u64 = 9;
    pub const ICA: u64 = 10;
    pub const OLM_INIT: u64 = 11;
    pub const EVAL_NOISE: u64 = 12;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An independent generator for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(tag ^ splitmix64(index)));
    rng
}

/// Folds two indices into one stream address (e.g. epoch and item).
pub fn index2(a: u64, b: u64) -> u64 {
    splitmix64(a).wrapping_add(b)
}

/// `n` standard normal draws from `rng`.
pub fn normal_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One standard normal draw.
pub fn normal(rng: &mut ChaCha12Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// One uniform draw in `[0, 1)`.
pub fn uniform(rng: &mut ChaCha12Rng) -> f64 {
    use rand::RngExt;
    rng.random::<f64>()
}
