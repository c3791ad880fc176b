//! Counter-based random draws.
//!
//! Every random quantity in a run is a pure function of
//! `(base_seed, domain, a, b, c)`, so draws can be made in any order, on any
//! thread, and replayed exactly. The mixer is a chain of SplitMix64
//! finalizers, one per key word.

/// Stochastic-rounding offsets shared by all workers, keyed by (k, coordinate).
pub const DOMAIN_ROUND_SHARED: u64 = 0x5348_4152_4544;
/// Stochastic-rounding offsets private to a worker, keyed by (k, worker, coordinate).
pub const DOMAIN_ROUND_WORKER: u64 = 0x574f_524b_4552;
/// Gradient noise, keyed by (k, worker, coordinate).
pub const DOMAIN_GRADIENT: u64 = 0x4752_4144;
/// Gossip pair selection, keyed by event index.
pub const DOMAIN_GOSSIP: u64 = 0x474f_5353_4950;
/// Gradient staleness draws, keyed by event index.
pub const DOMAIN_STALENESS: u64 = 0x53_5441_4c45;
/// Randomized-gossip keep/drop draws.
pub const DOMAIN_KEEP: u64 = 0x4b45_4550;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64 random bits for the key `(seed, domain, a, b, c)`.
#[inline]
pub fn counter_u64(seed: u64, domain: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(domain));
    h = splitmix64(h ^ a);
    h = splitmix64(h.wrapping_add(b).rotate_left(17));
    splitmix64(h ^ c.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn counter_uniform(seed: u64, domain: u64, a: u64, b: u64, c: u64) -> f64 {
    (counter_u64(seed, domain, a, b, c) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `0..bound` (bound > 0), by multiply-shift reduction.
#[inline]
pub fn counter_below(seed: u64, domain: u64, a: u64, b: u64, c: u64, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    ((counter_u64(seed, domain, a, b, c) as u128 * bound as u128) >> 64) as u64
}
