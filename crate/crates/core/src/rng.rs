//! Counter-based hashing for site bits and seed derivation.
//!
//! Each space-time site draws its bit from a hash of `(seed, n, x)`, so any
//! sub-window or shifted window of the same field reproduces the same bits.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn absorb(h: u64, v: i64) -> u64 {
    mix64(h.wrapping_add(GOLDEN) ^ (v as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Hash prefix for the time coordinate; continue with [`absorb`] per axis.
#[inline]
pub fn time_key(seed: u64, n: i64) -> u64 {
    absorb(mix64(seed ^ 0x6f70_7731_5eed_0000), n)
}

pub fn site_hash(seed: u64, x: &[i64], n: i64) -> u64 {
    x.iter().fold(time_key(seed, n), |h, &v| absorb(h, v))
}

/// Top 53 bits as a uniform in `[0, 1)`.
#[inline]
pub fn unit_f64(u: u64) -> f64 {
    (u >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bernoulli(p) from a hash; `p = 1` is always open and `p = 0` never.
#[inline]
pub fn bernoulli(u: u64, p: f64) -> bool {
    unit_f64(u) < p
}

/// Independent child seed for stream `tag`, index `i`.
pub fn derive_seed(base: u64, tag: &str, i: u64) -> u64 {
    let t = tag
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    mix64(mix64(base ^ t).wrapping_add(i.wrapping_mul(GOLDEN)))
}
