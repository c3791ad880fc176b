//! The modulo codec.
//!
//! With window `B = 2 theta / (1 - 2 delta)` a sender transmits only
//!
//! ```text
//! q = Q((x / B) mod 1)          mod: centered, into [-1/2, 1/2)
//! ```
//!
//! and a receiver holding `y` with `|x - y| < theta` recovers
//!
//! ```text
//! x_hat = (B q - y) mod B + y,      |x_hat - x| <= delta B
//! ```
//!
//! The sender uses the same lifted value for itself,
//! `x_hat_self = q B - (x mod B) + x`, so that every worker sees identical
//! quantization error on the same model and the error cancels out of the
//! averaging step.
//!
//! ## Integer formulation
//!
//! Rounding quantizers here use a unit-periodic grid of `m` points (step
//! `1/m`). Let `unit = B / m` and `G = floor(x / unit + u)` be the unbounded
//! grid index of `x` (`u = 1/2` for nearest rounding). Then `q B = (G mod m)
//! unit` up to a multiple of `B`, the transmitted code is `G mod m` in
//! `0..m`, and both the receiver's lift and the sender's self term equal
//! `G' unit` where `G'` is the member of the residue class closest to the
//! reference. Working with `G'` directly makes the receiver's value and the
//! sender's value bit-identical whenever the lift is correct, and gives an
//! exact way to check the lift: the sender hashes `G`, the receiver hashes
//! `G'`.
//!
//! The exact quantizer bypasses all of this and ships raw 64-bit floats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{
    bits_for_period, pack_codes, unpack_codes, QuantError, QuantizerKind, QuantizerSpec,
    SharedSeed,
};

/// FNV-1a 64-bit offset basis.
pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Wire magic.
pub const MAGIC: &[u8; 4] = b"MQ01";
const HEADER_LEN: usize = 4 + 4 + 1 + 8 + 8;

/// Largest grid index magnitude that still converts exactly through `f64`.
const MAX_INDEX: f64 = (1u64 << 52) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid modulus {0}: must be positive and finite")]
    InvalidModulus(f64),
    #[error("invalid codec parameter: {0}")]
    InvalidParameter(String),
    #[error("quantizer {0} has no finite error bound on the unit interval")]
    UnsupportedQuantizer(String),
    #[error("codec mismatch: message has {field} = {message}, codec has {codec}")]
    CodecMismatch {
        field: &'static str,
        message: f64,
        codec: f64,
    },
    #[error("recovered codes hash to {recovered:#018x}, sender sent {sent:#018x}: the difference bound theta was violated")]
    RecoveryVerificationFailed { sent: u64, recovered: u64 },
    #[error("dimension mismatch: message has {message}, reference has {reference}")]
    DimensionMismatch { message: usize, reference: usize },
    #[error("value {0} is out of the codec's representable range")]
    OutOfRange(f64),
    #[error("malformed message: {0}")]
    Wire(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// `z` shifted by an integer multiple of `a` into `[-a/2, a/2)`.
pub fn centered_mod(z: f64, a: f64) -> Result<f64, CodecError> {
    if !(a.is_finite() && a > 0.0) {
        return Err(CodecError::InvalidModulus(a));
    }
    if !z.is_finite() {
        return Err(CodecError::OutOfRange(z));
    }
    Ok(centered_mod_unchecked(z, a))
}

#[inline]
fn centered_mod_unchecked(z: f64, a: f64) -> f64 {
    let mut r = z - a * (z / a + 0.5).floor();
    // the floor can land one period off when z/a + 1/2 rounds across an integer
    if r >= a / 2.0 {
        r -= a;
    } else if r < -a / 2.0 {
        r += a;
    }
    r
}

/// Exact recovery of `x` from `x mod 2 theta` and a reference `y` with
/// `|x - y| < theta`:
///
/// ```text
/// x = (x mod 2 theta - y mod 2 theta) mod 2 theta + y
/// ```
pub fn lemma1_recover(x_mod: f64, y: f64, theta: f64) -> Result<f64, CodecError> {
    let a = 2.0 * theta;
    let y_mod = centered_mod(y, a)?;
    Ok(centered_mod(x_mod - y_mod, a)? + y)
}

/// FNV-1a 64 over the little-endian bytes of each code.
pub fn hash_codes(codes: &[i64]) -> u64 {
    let mut h = FNV_OFFSET;
    for c in codes {
        for b in c.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// `2 theta / (1 - 2 delta)`.
pub fn b_theta(theta: f64, delta: f64) -> Result<f64, CodecError> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(CodecError::InvalidParameter(format!(
            "theta must be positive and finite, got {theta}"
        )));
    }
    if !(0.0..0.5).contains(&delta) {
        return Err(CodecError::InvalidParameter(format!(
            "delta must be in [0, 1/2), got {delta}"
        )));
    }
    Ok(2.0 * theta / (1.0 - 2.0 * delta))
}

/// One exchange's worth of codec parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuloCodec {
    pub theta: f64,
    pub delta: f64,
    pub b_theta: f64,
    pub quantizer: QuantizerSpec,
    /// Grid points per unit interval; 0 for the exact quantizer.
    pub period: u64,
    pub bits_per_coord: u32,
}

impl ModuloCodec {
    pub fn new(theta: f64, quantizer: QuantizerSpec) -> Result<Self, CodecError> {
        let (period, bits) = match quantizer.kind {
            QuantizerKind::Exact => (0, 64),
            QuantizerKind::RandomizedGossip => {
                return Err(CodecError::UnsupportedQuantizer(
                    quantizer.kind.as_str().to_string(),
                ))
            }
            _ => {
                let m = quantizer.grid_period()?;
                (m, bits_for_period(m))
            }
        };
        let delta = quantizer.delta();
        Ok(ModuloCodec {
            theta,
            delta,
            b_theta: b_theta(theta, delta)?,
            quantizer,
            period,
            bits_per_coord: bits,
        })
    }

    /// Same quantizer, new difference bound.
    pub fn with_theta(&self, theta: f64) -> Result<Self, CodecError> {
        Self::new(theta, self.quantizer)
    }

    /// Worst-case recovery error `delta B = theta 2 delta / (1 - 2 delta)`.
    pub fn error_bound(&self) -> f64 {
        self.delta * self.b_theta
    }

    pub fn is_exact(&self) -> bool {
        self.quantizer.kind == QuantizerKind::Exact
    }

    /// Grid spacing in model units, `B / m`.
    pub fn unit(&self) -> f64 {
        self.b_theta / self.period as f64
    }

    /// `(x / B) mod 1`, the value the quantizer sees.
    pub fn modded(&self, x: f64) -> Result<f64, CodecError> {
        centered_mod(x / self.b_theta, 1.0)
    }

    #[inline]
    fn scaled(&self, x: f64) -> f64 {
        x / self.b_theta * self.period as f64
    }

    /// Model value of grid index `g`.
    #[inline]
    pub fn value_of_index(&self, g: i64) -> f64 {
        g as f64 * self.unit()
    }

    /// Unbounded grid indices `floor(x / unit + u)` of a model vector; for the
    /// exact quantizer, the raw bit patterns.
    pub fn grid_indices(
        &self,
        x: &[f64],
        k: u64,
        worker: usize,
        seed: &SharedSeed,
    ) -> Result<Vec<i64>, CodecError> {
        if self.is_exact() {
            return x
                .iter()
                .map(|&v| {
                    if v.is_finite() {
                        Ok(v.to_bits() as i64)
                    } else {
                        Err(CodecError::OutOfRange(v))
                    }
                })
                .collect();
        }
        let q = &self.quantizer;
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let u = match q.kind {
                    QuantizerKind::NearestRound => 0.5,
                    _ => seed.offset(q.randomness, k, worker, j),
                };
                let g = (self.scaled(v) + u).floor();
                if g.is_finite() && g.abs() < MAX_INDEX {
                    Ok(g as i64)
                } else {
                    Err(CodecError::OutOfRange(v))
                }
            })
            .collect()
    }

    /// Encodes `x` for iteration `k`. With `with_hash`, the message carries
    /// the digest of the unbounded grid indices.
    pub fn encode(
        &self,
        x: &[f64],
        k: u64,
        worker: usize,
        seed: &SharedSeed,
        with_hash: bool,
    ) -> Result<EncodedMessage, CodecError> {
        let g = self.grid_indices(x, k, worker, seed)?;
        self.message_from_indices(&g, with_hash)
    }

    pub fn message_from_indices(
        &self,
        g: &[i64],
        with_hash: bool,
    ) -> Result<EncodedMessage, CodecError> {
        let codes: Vec<u64> = if self.is_exact() {
            g.iter().map(|&v| v as u64).collect()
        } else {
            let m = self.period as i64;
            g.iter().map(|&v| v.rem_euclid(m) as u64).collect()
        };
        Ok(EncodedMessage {
            dim: g.len(),
            bits_per_coord: self.bits_per_coord,
            theta: self.theta,
            delta: self.delta,
            packed: pack_codes(&codes, self.bits_per_coord)?,
            code_hash: with_hash.then(|| hash_codes(g)),
        })
    }

    fn check(&self, msg: &EncodedMessage, reference: usize) -> Result<(), CodecError> {
        if msg.theta.to_bits() != self.theta.to_bits() {
            return Err(CodecError::CodecMismatch {
                field: "theta",
                message: msg.theta,
                codec: self.theta,
            });
        }
        if msg.delta.to_bits() != self.delta.to_bits() {
            return Err(CodecError::CodecMismatch {
                field: "delta",
                message: msg.delta,
                codec: self.delta,
            });
        }
        if msg.bits_per_coord != self.bits_per_coord {
            return Err(CodecError::CodecMismatch {
                field: "bits_per_coord",
                message: msg.bits_per_coord as f64,
                codec: self.bits_per_coord as f64,
            });
        }
        if msg.dim != reference {
            return Err(CodecError::DimensionMismatch {
                message: msg.dim,
                reference,
            });
        }
        Ok(())
    }

    /// Grid indices lifted next to `x_ref`.
    pub fn lift_indices(&self, msg: &EncodedMessage, x_ref: &[f64]) -> Result<Vec<i64>, CodecError> {
        self.check(msg, x_ref.len())?;
        let codes = unpack_codes(&msg.packed, msg.bits_per_coord, msg.dim)?;
        if self.is_exact() {
            return Ok(codes.into_iter().map(|c| c as i64).collect());
        }
        let m = self.period as f64;
        codes
            .iter()
            .zip(x_ref)
            .map(|(&c, &y)| {
                let c = c as f64;
                let t = self.scaled(y);
                let g = c - m * ((c - t) / m + 0.5).floor();
                if g.is_finite() && g.abs() < MAX_INDEX {
                    Ok(g as i64)
                } else {
                    Err(CodecError::OutOfRange(y))
                }
            })
            .collect()
    }

    fn values(&self, g: &[i64]) -> Vec<f64> {
        if self.is_exact() {
            g.iter().map(|&v| f64::from_bits(v as u64)).collect()
        } else {
            let unit = self.unit();
            g.iter().map(|&v| v as f64 * unit).collect()
        }
    }

    /// Receiver-side recovery of the sender's model next to `x_ref`. Checks
    /// the code digest when the message carries one.
    pub fn decode_remote(&self, msg: &EncodedMessage, x_ref: &[f64]) -> Result<Vec<f64>, CodecError> {
        let g = self.lift_indices(msg, x_ref)?;
        if let Some(sent) = msg.code_hash {
            let recovered = hash_codes(&g);
            if recovered != sent {
                return Err(CodecError::RecoveryVerificationFailed { sent, recovered });
            }
        }
        Ok(self.values(&g))
    }

    /// The sender's own lifted value `q B - (x mod B) + x`.
    pub fn self_bias(&self, x: &[f64], msg: &EncodedMessage) -> Result<Vec<f64>, CodecError> {
        self.decode_remote(msg, x)
    }

    /// Self term straight from the sender's grid indices, skipping the
    /// pack/unpack round trip.
    pub fn self_bias_from_indices(&self, g: &[i64]) -> Vec<f64> {
        self.values(g)
    }
}

/// A packed message with its codec tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMessage {
    pub dim: usize,
    pub bits_per_coord: u32,
    pub theta: f64,
    pub delta: f64,
    pub packed: Vec<u8>,
    pub code_hash: Option<u64>,
}

impl EncodedMessage {
    /// Payload bits, excluding the header and digest.
    pub fn payload_bits(&self) -> u64 {
        self.dim as u64 * self.bits_per_coord as u64
    }

    /// `"MQ01" | dim u32 | bits u8 | theta f64 | delta f64 | codes | hash u64`,
    /// integers and floats little-endian, hash 0 when absent.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CodecError> {
        let dim = u32::try_from(self.dim)
            .map_err(|_| CodecError::Wire(format!("dimension {} exceeds u32", self.dim)))?;
        let bits = u8::try_from(self.bits_per_coord)
            .map_err(|_| CodecError::Wire(format!("bits {} exceed u8", self.bits_per_coord)))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.packed.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&dim.to_le_bytes());
        out.push(bits);
        out.extend_from_slice(&self.theta.to_le_bytes());
        out.extend_from_slice(&self.delta.to_le_bytes());
        out.extend_from_slice(&self.packed);
        out.extend_from_slice(&self.code_hash.unwrap_or(0).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN + 8 {
            return Err(CodecError::Wire(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CodecError::Wire("bad magic".into()));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let bits = bytes[8] as u32;
        if bits == 0 || bits > 64 {
            return Err(CodecError::Wire(format!("bits per coordinate {bits}")));
        }
        let theta = f64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let delta = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
        let payload = (dim * bits as usize).div_ceil(8);
        let expected = HEADER_LEN + payload + 8;
        if bytes.len() != expected {
            return Err(CodecError::Wire(format!(
                "expected {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let packed = bytes[HEADER_LEN..HEADER_LEN + payload].to_vec();
        let hash = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
        Ok(EncodedMessage {
            dim,
            bits_per_coord: bits,
            theta,
            delta,
            packed,
            code_hash: (hash != 0).then_some(hash),
        })
    }
}
