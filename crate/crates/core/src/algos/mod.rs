//! Algorithm steppers.
//!
//! Synchronous steppers advance all workers by one iteration:
//!
//! ```text
//! D-PSGD           x_i <- x_i + sum_{j in N_i} (x_j - x_i) W_ji - alpha g_i
//! naive quantized  x_i <- x_i + sum_{j in N_i} (Q(x_j) - x_i) W_ji - alpha g_i
//! modulo-coded     x_i <- x_i + sum_{j in N_i} (xh_j - xh_i) W_ji - alpha g_i
//! D2               x_half = 2 x_k - x_{k-1} - alpha g_k + alpha g_{k-1}, then exchange x_half
//! ```
//!
//! The first form equals `X W - alpha G` because `W_ii = 1 - sum_{j != i} W_ji`;
//! writing it with differences makes it bit-identical to the modulo-coded
//! stepper when the codec is exact. In the modulo-coded forms `xh_j` is the
//! lift of `j`'s message, which receivers and the sender agree on exactly, so
//! the pairwise terms cancel in the average and
//!
//! ```text
//! mean(X_{k+1}) = mean(X_k) - alpha mean(G_k)
//! ```
//!
//! holds up to rounding. The asynchronous stepper lives in [`adpsgd`].

pub mod adpsgd;
pub mod sync;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::objectives::ObjectiveError;

pub use adpsgd::{event_moniqua_adpsgd, AsyncContext, EventOutcome};
pub use sync::{step_dpsgd_full, step_dpsgd_naive, step_moniqua, step_moniqua_d2, StepOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgoError {
    #[error("consensus violated at iteration {k}: |x_{i} - x_{j}|_inf = {distance:.6e} >= theta = {theta:.6e} (margin {margin:.3e})", margin = distance - theta)]
    ConsensusViolated {
        k: u64,
        i: usize,
        j: usize,
        distance: f64,
        theta: f64,
    },
    #[error("iteration {k}, worker {receiver} decoding worker {sender}: {source}")]
    Codec {
        k: u64,
        receiver: usize,
        sender: usize,
        source: CodecError,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("state error: {0}")]
    State(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dpsgd,
    DpsgdNaive,
    Moniqua,
    MoniquaD2,
    MoniquaAdpsgd,
}

impl Algorithm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dpsgd" => Some(Self::Dpsgd),
            "dpsgd_naive" => Some(Self::DpsgdNaive),
            "moniqua" => Some(Self::Moniqua),
            "moniqua_d2" => Some(Self::MoniquaD2),
            "moniqua_adpsgd" => Some(Self::MoniquaAdpsgd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dpsgd => "dpsgd",
            Self::DpsgdNaive => "dpsgd_naive",
            Self::Moniqua => "moniqua",
            Self::MoniquaD2 => "moniqua_d2",
            Self::MoniquaAdpsgd => "moniqua_adpsgd",
        }
    }

    /// Whether the stepper exchanges through the modulo codec.
    pub fn uses_codec(self) -> bool {
        matches!(self, Self::Moniqua | Self::MoniquaD2 | Self::MoniquaAdpsgd)
    }
}

/// A gradient waiting to be applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StaleGradient {
    /// Event at which the gradient was computed.
    pub inserted: u64,
    /// Event at which it is applied.
    pub due: u64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub x: Vec<f64>,
    /// Previous model, D2 only.
    pub x_prev: Vec<f64>,
    /// Previous gradient, D2 only.
    pub g_prev: Vec<f64>,
    /// Pending gradients ordered by due event, AD-PSGD only.
    pub stale_queue: VecDeque<StaleGradient>,
}

impl WorkerState {
    pub fn zeros(dim: usize) -> Self {
        WorkerState {
            x: vec![0.0; dim],
            x_prev: vec![0.0; dim],
            g_prev: vec![0.0; dim],
            stale_queue: VecDeque::new(),
        }
    }
}

/// `n` workers at the common starting point zero.
pub fn init_states(n: usize, dim: usize) -> Vec<WorkerState> {
    (0..n).map(|_| WorkerState::zeros(dim)).collect()
}

pub fn mean_model(states: &[WorkerState]) -> Vec<f64> {
    let dim = states.first().map_or(0, |s| s.x.len());
    let mut m = vec![0.0; dim];
    for s in states {
        for (a, b) in m.iter_mut().zip(&s.x) {
            *a += b;
        }
    }
    let n = states.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Largest pairwise infinity-norm distance among worker models, with a pair
/// attaining it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusDistance {
    pub distance: f64,
    pub i: usize,
    pub j: usize,
}

/// Per-coordinate spread `max_i x_ij - min_i x_ij`, maximized over `j`; equal
/// to `max_{i,j} |x_i - x_j|_inf` and computed in `O(n d)`.
pub fn consensus_inf<'a, I>(models: I) -> ConsensusDistance
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let mut best = ConsensusDistance {
        distance: 0.0,
        i: 0,
        j: 0,
    };
    let dim = models.clone().into_iter().next().map_or(0, <[f64]>::len);
    for c in 0..dim {
        let (mut lo, mut hi) = ((f64::INFINITY, 0), (f64::NEG_INFINITY, 0));
        for (w, x) in models.clone().into_iter().enumerate() {
            let v = x[c];
            if v < lo.0 {
                lo = (v, w);
            }
            if v > hi.0 {
                hi = (v, w);
            }
        }
        let d = hi.0 - lo.0;
        if d > best.distance || d.is_nan() {
            best = ConsensusDistance {
                distance: d,
                i: hi.1,
                j: lo.1,
            };
        }
    }
    best
}

pub fn consensus_inf_states(states: &[WorkerState]) -> ConsensusDistance {
    consensus_inf(states.iter().map(|s| s.x.as_slice()))
}

/// `(1/n) sum_i |mean - x_i|^2`.
pub fn consensus_l2(states: &[WorkerState]) -> f64 {
    let m = mean_model(states);
    states
        .iter()
        .map(|s| s.x.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / states.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardMode {
    #[default]
    Off,
    /// Abort when the models spread by `theta` or more.
    Assert,
    /// Hash-check every lift and abort on a mismatch; spreads beyond
    /// `theta` are logged but tolerated while the lift stays correct.
    VerifyHash,
}

impl GuardMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(Self::Off),
            "assert" => Some(Self::Assert),
            "verify_hash" => Some(Self::VerifyHash),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::Assert => "assert",
            Self::VerifyHash => "verify_hash",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub k: u64,
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub theta: f64,
}

/// Checks the spread of the values about to be encoded against the codec's
/// difference bound.
#[derive(Debug, Clone, Default)]
pub struct ConsensusGuard {
    pub mode: GuardMode,
    pub violations: Vec<Violation>,
    /// Largest spread seen at a check, for diagnostics.
    pub max_distance: f64,
}

impl ConsensusGuard {
    pub fn new(mode: GuardMode) -> Self {
        ConsensusGuard {
            mode,
            ..Default::default()
        }
    }

    pub fn hashes(&self) -> bool {
        self.mode == GuardMode::VerifyHash
    }

    pub fn check<'a, I>(&mut self, k: u64, models: I, theta: f64) -> Result<(), AlgoError>
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        if self.mode == GuardMode::Off {
            return Ok(());
        }
        let c = consensus_inf(models);
        self.max_distance = self.max_distance.max(c.distance);
        if c.distance < theta {
            return Ok(());
        }
        let v = Violation {
            k,
            i: c.i,
            j: c.j,
            distance: c.distance,
            theta,
        };
        self.violations.push(v);
        if self.mode == GuardMode::Assert {
            return Err(AlgoError::ConsensusViolated {
                k,
                i: v.i,
                j: v.j,
                distance: v.distance,
                theta,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_dims(states: &[WorkerState], grads: &[Vec<f64>]) -> Result<usize, AlgoError> {
    let dim = states
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| AlgoError::State("no workers".into()))?;
    if grads.len() != states.len() {
        return Err(AlgoError::State(format!(
            "{} gradients for {} workers",
            grads.len(),
            states.len()
        )));
    }
    for (i, (s, g)) in states.iter().zip(grads).enumerate() {
        if s.x.len() != dim || g.len() != dim {
            return Err(AlgoError::State(format!(
                "worker {i}: model has {} coordinates, gradient {}, expected {dim}",
                s.x.len(),
                g.len()
            )));
        }
    }
    Ok(dim)
}
