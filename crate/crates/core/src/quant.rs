//! Bounded-error quantizers, stochastic-rounding randomness and bit packing.
//!
//! Every rounding quantizer obeys the contract
//!
//! ```text
//! |Q(x) - x| <= delta    for x in [-1/2, 1/2)
//! ```
//!
//! where `delta` is derived from the grid step `s`:
//!
//! ```text
//! stochastic:  Q(x) = s * floor(x / s + u),  u ~ U[0,1)   delta = s
//! nearest:     Q(x) = s * floor(x / s + 1/2)              delta = s / 2
//! ```
//!
//! Stochastic rounding is unbiased. When every worker uses the same offset
//! `u` for a coordinate (shared randomness), the difference of two rounding
//! errors has second moment `(1 - f)(f)` with `f = y_f - x_f` the gap of the
//! fractional parts, which is much smaller than the independent-offset value
//! when the inputs are close.
//!
//! Codes are packed LSB-first: code `i` occupies bits `[i*b, (i+1)*b)` of the
//! little-endian bit stream.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{counter_uniform, DOMAIN_ROUND_SHARED, DOMAIN_ROUND_WORKER};

/// Relative tolerance when checking that `1/step` is an integer.
pub const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("code {code} does not fit in {bits} bits")]
    CodeOverflow { code: u64, bits: u32 },
    #[error("packed buffer holds {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    StochasticRound,
    NearestRound,
    RandomizedGossip,
    /// No quantization; values travel as raw 64-bit floats.
    Exact,
}

impl QuantizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stochastic_round" | "stochastic" => Some(Self::StochasticRound),
            "nearest_round" | "nearest" => Some(Self::NearestRound),
            "randomized_gossip" | "gossip" => Some(Self::RandomizedGossip),
            "exact" | "none" => Some(Self::Exact),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::StochasticRound => "stochastic_round",
            Self::NearestRound => "nearest_round",
            Self::RandomizedGossip => "randomized_gossip",
            Self::Exact => "exact",
        }
    }
}

/// Whether stochastic-rounding offsets are shared across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Randomness {
    #[default]
    Shared,
    Independent,
}

/// Source of rounding offsets. Shared draws are keyed by `(k, coordinate)`
/// only, so every worker sees the same `u`; independent draws add the worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedSeed {
    pub base_seed: u64,
}

impl SharedSeed {
    pub fn new(base_seed: u64) -> Self {
        SharedSeed { base_seed }
    }

    /// Offset shared by all workers at iteration `k`.
    #[inline]
    pub fn shared(&self, k: u64, coord: usize) -> f64 {
        counter_uniform(self.base_seed, DOMAIN_ROUND_SHARED, k, coord as u64, 0)
    }

    /// Offset private to `worker` at iteration `k`.
    #[inline]
    pub fn independent(&self, k: u64, worker: usize, coord: usize) -> f64 {
        counter_uniform(self.base_seed, DOMAIN_ROUND_WORKER, k, worker as u64, coord as u64)
    }

    #[inline]
    pub fn offset(&self, policy: Randomness, k: u64, worker: usize, coord: usize) -> f64 {
        match policy {
            Randomness::Shared => self.shared(k, coord),
            Randomness::Independent => self.independent(k, worker, coord),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    /// Grid step for the rounding kinds; ignored otherwise.
    pub step: f64,
    /// Keep probability for randomized gossip; ignored otherwise.
    pub keep_prob: f64,
    pub randomness: Randomness,
}

impl QuantizerSpec {
    pub fn stochastic(step: f64, randomness: Randomness) -> Result<Self, QuantError> {
        Self::new(QuantizerKind::StochasticRound, step, 1.0, randomness)
    }

    pub fn nearest(step: f64) -> Result<Self, QuantError> {
        Self::new(QuantizerKind::NearestRound, step, 1.0, Randomness::Shared)
    }

    pub fn exact() -> Self {
        QuantizerSpec {
            kind: QuantizerKind::Exact,
            step: 0.0,
            keep_prob: 1.0,
            randomness: Randomness::Shared,
        }
    }

    pub fn gossip(keep_prob: f64) -> Result<Self, QuantError> {
        Self::new(QuantizerKind::RandomizedGossip, 0.0, keep_prob, Randomness::Independent)
    }

    pub fn new(
        kind: QuantizerKind,
        step: f64,
        keep_prob: f64,
        randomness: Randomness,
    ) -> Result<Self, QuantError> {
        match kind {
            QuantizerKind::StochasticRound | QuantizerKind::NearestRound => {
                if !(step.is_finite() && step > 0.0) {
                    return Err(QuantError::InvalidParameter(format!(
                        "grid step must be positive and finite, got {step}"
                    )));
                }
            }
            QuantizerKind::RandomizedGossip => {
                if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                    return Err(QuantError::InvalidParameter(format!(
                        "keep probability must be in (0, 1], got {keep_prob}"
                    )));
                }
            }
            QuantizerKind::Exact => {}
        }
        Ok(QuantizerSpec {
            kind,
            step,
            keep_prob,
            randomness,
        })
    }

    /// Coarsest unit-period grid whose error bound is at most `delta`:
    /// step `1/ceil(1/(2 delta))` for nearest rounding, `1/ceil(1/delta)` for
    /// stochastic rounding.
    pub fn for_delta(
        kind: QuantizerKind,
        delta: f64,
        randomness: Randomness,
    ) -> Result<Self, QuantError> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(QuantError::InvalidParameter(format!(
                "delta must be in (0, 1/2), got {delta}"
            )));
        }
        let m = match kind {
            QuantizerKind::NearestRound => (1.0 / (2.0 * delta) - GRID_TOL).ceil(),
            QuantizerKind::StochasticRound => (1.0 / delta - GRID_TOL).ceil(),
            QuantizerKind::Exact => return Ok(Self::exact()),
            QuantizerKind::RandomizedGossip => {
                return Err(QuantError::InvalidParameter(
                    "randomized gossip has no grid".into(),
                ))
            }
        };
        Self::new(kind, 1.0 / m.max(2.0), 1.0, randomness)
    }

    /// Worst-case error on `[-1/2, 1/2)`. Randomized gossip drops whole
    /// values, so its bound is the input radius 1/2.
    pub fn delta(&self) -> f64 {
        match self.kind {
            QuantizerKind::StochasticRound => self.step,
            QuantizerKind::NearestRound => self.step / 2.0,
            QuantizerKind::RandomizedGossip => 0.5,
            QuantizerKind::Exact => 0.0,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(
            self.kind,
            QuantizerKind::StochasticRound | QuantizerKind::RandomizedGossip
        )
    }

    /// Number of grid points per unit interval, when `1/step` is an integer
    /// `m >= 2` (within [`GRID_TOL`]).
    pub fn grid_period(&self) -> Result<u64, QuantError> {
        match self.kind {
            QuantizerKind::StochasticRound | QuantizerKind::NearestRound => {
                let inv = 1.0 / self.step;
                let m = inv.round();
                if m < 2.0 || (inv - m).abs() > GRID_TOL * m || m > (1u64 << 52) as f64 {
                    return Err(QuantError::InvalidParameter(format!(
                        "grid step {} must be 1/m for an integer m >= 2",
                        self.step
                    )));
                }
                Ok(m as u64)
            }
            _ => Err(QuantError::InvalidParameter(format!(
                "{} has no periodic grid",
                self.kind.as_str()
            ))),
        }
    }

    /// Applies the quantizer to one value with rounding offset `u`.
    pub fn apply(&self, x: f64, u: f64) -> Result<f64, QuantError> {
        match self.kind {
            QuantizerKind::StochasticRound => stochastic_round(x, self.step, u),
            QuantizerKind::NearestRound => nearest_round(x, self.step),
            QuantizerKind::RandomizedGossip => {
                finite(x)?;
                Ok(if u < self.keep_prob { x } else { 0.0 })
            }
            QuantizerKind::Exact => finite(x),
        }
    }
}

fn finite(x: f64) -> Result<f64, QuantError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(QuantError::NonFinite(x))
    }
}

/// `s * floor(x/s + u)`.
pub fn stochastic_round(x: f64, step: f64, u: f64) -> Result<f64, QuantError> {
    finite(x)?;
    if !(step > 0.0) {
        return Err(QuantError::InvalidParameter(format!("step {step}")));
    }
    Ok(step * (x / step + u).floor())
}

/// `s * floor(x/s + 1/2)`; ties round up.
pub fn nearest_round(x: f64, step: f64) -> Result<f64, QuantError> {
    stochastic_round(x, step, 0.5)
}

/// `x` with probability `p`, else 0.
pub fn randomized_gossip<R: Rng + ?Sized>(x: f64, p: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < p {
        x
    } else {
        0.0
    }
}

/// `ceil(log2(1/(2 delta) + 1))`: bits needed by a linear quantizer with
/// worst-case error `delta` on the unit interval.
pub fn bits_required(delta: f64) -> Result<u32, QuantError> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(QuantError::InvalidParameter(format!(
            "bits bound needs 0 < delta < 1/2, got {delta}"
        )));
    }
    Ok(ceil_log2_real(1.0 / (2.0 * delta) + 1.0))
}

/// Bits for codes in `0..m`, at least 1.
pub fn bits_for_period(m: u64) -> u32 {
    if m <= 2 {
        1
    } else {
        64 - (m - 1).leading_zeros()
    }
}

/// `ceil(log2(v))` for `v >= 1`, snapping values within 1e-12 of a power of
/// two so that e.g. `log2(4)` does not round up to 3.
fn ceil_log2_real(v: f64) -> u32 {
    let l = v.log2();
    let r = l.round();
    if (l - r).abs() < 1e-12 {
        r as u32
    } else {
        l.ceil() as u32
    }
}

/// Closed-form bit budget `ceil(log2(4 log2(16 n)/(1 - rho) + 3))` for the
/// modulo codec on a fixed matrix with constant step.
pub fn bits_bound(n: usize, rho: f64) -> Result<u32, QuantError> {
    if !(0.0..1.0).contains(&rho) || n == 0 {
        return Err(QuantError::InvalidParameter(format!(
            "bit budget needs n >= 1 and 0 <= rho < 1, got n={n}, rho={rho}"
        )));
    }
    Ok(ceil_log2_real(4.0 * (16.0 * n as f64).log2() / (1.0 - rho) + 3.0))
}

/// Packs `codes` at `bits` per code, LSB-first.
pub fn pack_codes(codes: &[u64], bits: u32) -> Result<Vec<u8>, QuantError> {
    if bits == 0 || bits > 64 {
        return Err(QuantError::InvalidParameter(format!("bits per code {bits}")));
    }
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &code in codes {
        if bits < 64 && code >> bits != 0 {
            return Err(QuantError::CodeOverflow { code, bits });
        }
        let mut remaining = bits;
        let mut value = code;
        while remaining > 0 {
            let byte = pos / 8;
            let off = (pos % 8) as u32;
            let take = remaining.min(8 - off);
            let mask = ((1u16 << take) - 1) as u8;
            out[byte] |= ((value as u8) & mask) << off;
            value = value.checked_shr(take).unwrap_or(0);
            remaining -= take;
            pos += take as usize;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u64>, QuantError> {
    if bits == 0 || bits > 64 {
        return Err(QuantError::InvalidParameter(format!("bits per code {bits}")));
    }
    let need = (count * bits as usize).div_ceil(8);
    if bytes.len() < need {
        return Err(QuantError::Truncated {
            have: bytes.len(),
            need,
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut value = 0u64;
        let mut got = 0u32;
        while got < bits {
            let byte = pos / 8;
            let off = (pos % 8) as u32;
            let take = (bits - got).min(8 - off);
            let chunk = (bytes[byte] >> off) as u64 & ((1u64 << take) - 1);
            value |= chunk << got;
            got += take;
            pos += take as usize;
        }
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_examples() {
        assert_eq!(stochastic_round(0.3, 1.0, 0.5).unwrap(), 0.0);
        assert_eq!(stochastic_round(0.3, 1.0, 0.8).unwrap(), 1.0);
        assert!((nearest_round(0.26, 0.1).unwrap() - 0.3).abs() < 1e-15);
        assert!((nearest_round(0.25, 0.1).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(nearest_round(0.0, 0.1).unwrap(), 0.0);
        assert!(matches!(nearest_round(f64::NAN, 0.1), Err(QuantError::NonFinite(_))));
        assert!(stochastic_round(f64::INFINITY, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_points_are_fixed() {
        let s = 0.125;
        for k in -20..20 {
            for u in [0.0, 0.3, 0.999_999] {
                assert_eq!(stochastic_round(k as f64 * s, s, u).unwrap(), k as f64 * s);
            }
        }
    }

    #[test]
    fn gossip_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(randomized_gossip(2.5, 1.0, &mut rng), 2.5);
        assert_eq!(randomized_gossip(0.0, 0.3, &mut rng), 0.0);
        let n = 100_000;
        let mean = (0..n).map(|_| randomized_gossip(1.0, 0.7, &mut rng)).sum::<f64>() / n as f64;
        let sd = (0.7f64 * 0.3 / n as f64).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn bits_examples() {
        assert_eq!(bits_required(0.25).unwrap(), 2);
        assert_eq!(bits_required(1.0 / 6.0).unwrap(), 2);
        assert_eq!(bits_required(0.005).unwrap(), 7);
        assert!(bits_required(0.5).is_err());
        assert!(bits_required(0.0).is_err());
        assert_eq!(bits_bound(8, 0.804738).unwrap(), 8);
        assert_eq!(bits_for_period(2), 1);
        assert_eq!(bits_for_period(3), 2);
        assert_eq!(bits_for_period(256), 8);
        assert_eq!(bits_for_period(257), 9);
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_codes(&[1, 0, 1, 1], 1).unwrap(), vec![0b0000_1101]);
        assert!(pack_codes(&[], 5).unwrap().is_empty());
        assert_eq!(pack_codes(&[4], 2), Err(QuantError::CodeOverflow { code: 4, bits: 2 }));
        assert_eq!(pack_codes(&[0x3ff, 1], 10).unwrap(), vec![0xff, 0x07, 0x00]);
        assert!(matches!(unpack_codes(&[0], 8, 2), Err(QuantError::Truncated { .. })));
    }

    #[test]
    fn delta_conventions() {
        assert_eq!(QuantizerSpec::stochastic(0.1, Randomness::Shared).unwrap().delta(), 0.1);
        assert_eq!(QuantizerSpec::nearest(0.1).unwrap().delta(), 0.05);
        assert_eq!(QuantizerSpec::exact().delta(), 0.0);
        let q = QuantizerSpec::for_delta(QuantizerKind::NearestRound, 0.005, Randomness::Shared).unwrap();
        assert_eq!(q.grid_period().unwrap(), 100);
        let q = QuantizerSpec::for_delta(QuantizerKind::NearestRound, 0.25, Randomness::Shared).unwrap();
        assert_eq!(q.grid_period().unwrap(), 2);
        let q = QuantizerSpec::for_delta(QuantizerKind::StochasticRound, 0.004, Randomness::Shared).unwrap();
        assert_eq!(q.grid_period().unwrap(), 250);
        assert!(q.delta() <= 0.004);
        assert!(QuantizerSpec::nearest(0.3).unwrap().grid_period().is_err());
        assert!(QuantizerSpec::nearest(0.0).is_err());
        assert!(QuantizerSpec::gossip(0.0).is_err());
    }

    #[test]
    fn shared_offsets_ignore_worker() {
        let s = SharedSeed::new(42);
        for k in 0..10 {
            for c in 0..10 {
                assert_eq!(
                    s.offset(Randomness::Shared, k, 0, c),
                    s.offset(Randomness::Shared, k, 7, c)
                );
                assert_ne!(
                    s.offset(Randomness::Independent, k, 0, c),
                    s.offset(Randomness::Independent, k, 7, c)
                );
            }
            assert_ne!(s.shared(k, 0), s.shared(k + 1, 0));
        }
    }

    proptest! {
        #[test]
        fn pack_round_trip(bits in 1u32..=64, raw in proptest::collection::vec(any::<u64>(), 0..64)) {
            let codes: Vec<u64> = raw.iter().map(|c| if bits == 64 { *c } else { c & ((1u64 << bits) - 1) }).collect();
            let bytes = pack_codes(&codes, bits).unwrap();
            prop_assert_eq!(bytes.len(), (codes.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(unpack_codes(&bytes, bits, codes.len()).unwrap(), codes);
        }

        #[test]
        fn rounding_contract(x in -0.5f64..0.5, m in 2u64..1000, u in 0.0f64..1.0) {
            let s = 1.0 / m as f64;
            let q = stochastic_round(x, s, u).unwrap();
            prop_assert!((q - x).abs() <= s + 1e-15);
            let q = nearest_round(x, s).unwrap();
            prop_assert!((q - x).abs() <= s / 2.0 + 1e-15);
        }
    }
}
