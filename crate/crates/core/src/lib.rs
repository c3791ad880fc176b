//! Simulation lab for modulo-quantized decentralized SGD.
//!
//! Workers exchange `Q((x / B) mod 1)` instead of `Q(x)`: because neighboring
//! models stay within an a-priori bound `theta` of each other, the receiver can
//! lift the modded value back next to its own model, and the quantizer only has
//! to cover the unit interval. The crate provides
//!
//! - [`topo`]: mixing matrices, spectral quantities, slack matrices and
//!   randomized pair-gossip schedules with empirical mixing-time checks;
//! - [`quant`]: bounded-error quantizers, shared randomness, bit packing;
//! - [`codec`]: centered modulo, encode/decode, local-bias term, code hashing
//!   and the binary message layout;
//! - [`theory`]: closed-form parameter calculators (theta/delta schedules,
//!   slack ratio, D2 constants, asynchronous parameters, divergence floor);
//! - [`objectives`]: synthetic problems with controllable noise and
//!   heterogeneity;
//! - [`algos`]: D-PSGD (full precision and naive quantization), modulo-coded
//!   D-PSGD, D2 and event-driven AD-PSGD steppers;
//! - [`harness`]: configuration, runs, traces, sweeps and the verification
//!   suite.

pub mod algos;
pub mod codec;
pub mod harness;
pub mod objectives;
pub mod quant;
pub mod seed;
pub mod theory;
pub mod topo;

pub use codec::{EncodedMessage, ModuloCodec};
pub use quant::{QuantizerKind, QuantizerSpec, Randomness, SharedSeed};
pub use topo::{CommMatrix, GossipSchedule, LogBase};
