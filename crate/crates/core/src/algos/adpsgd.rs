//! Event-driven asynchronous modulo-coded gossip SGD.
//!
//! Event `k` picks a pair `(i, j)` from the gossip schedule. Worker `i`
//! samples a gradient at its current model and queues it for event
//! `k + tau`, `tau` uniform on `{0..T}`. Then `i` and `j` exchange through the
//! codec and move halfway towards each other's lifted model, and every queued
//! gradient that is due is applied to its worker:
//!
//! ```text
//! X_{k+1} = X_k W_k + (Xh_k - X_k)(W_k - I) - alpha G_{k - tau}
//! ```
//!
//! For a pair matrix this is `x_i <- x_i + (xh_j - xh_i)/2` and the same with
//! `i` and `j` swapped. Pair choice, delays and rounding offsets all derive
//! from the seeds, so a run is a pure function of its configuration.

use crate::codec::ModuloCodec;
use crate::objectives::GradOracle;
use crate::quant::SharedSeed;
use crate::seed::{counter_below, DOMAIN_STALENESS};
use crate::topo::{GossipEvent, GossipSchedule};

use super::{AlgoError, ConsensusGuard, StaleGradient, WorkerState};

/// Everything an event needs besides the mutable state.
#[derive(Debug, Clone, Copy)]
pub struct AsyncContext<'a> {
    pub schedule: &'a GossipSchedule,
    pub codec: &'a ModuloCodec,
    pub oracle: &'a GradOracle,
    pub rounding: SharedSeed,
    /// Seed for staleness draws.
    pub seed: u64,
    /// Largest gradient delay `T`, in events.
    pub max_staleness: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome {
    pub initiator: usize,
    pub peer: usize,
    /// Delay drawn for the gradient sampled at this event.
    pub tau: u64,
    /// Number of queued gradients applied at this event.
    pub applied: usize,
    pub bits: u64,
    /// `mean(X_k) - alpha/n * (sum of applied gradients)`.
    pub expected_mean: Vec<f64>,
}

pub fn staleness_draw(seed: u64, k: u64, max_staleness: u64) -> u64 {
    counter_below(seed, DOMAIN_STALENESS, k, 0, 0, max_staleness + 1)
}

/// Runs event `k`.
pub fn event_moniqua_adpsgd(
    states: &mut [WorkerState],
    ctx: &AsyncContext<'_>,
    alpha: f64,
    guard: &mut ConsensusGuard,
    k: u64,
) -> Result<EventOutcome, AlgoError> {
    let n = states.len();
    if ctx.schedule.n() != n {
        return Err(AlgoError::State(format!(
            "schedule has {} workers, state has {n}",
            ctx.schedule.n()
        )));
    }
    let (i, j) = match ctx.schedule.event(k) {
        GossipEvent::Pair { initiator, peer } => (initiator, peer),
        GossipEvent::Dense => {
            return Err(AlgoError::State(
                "asynchronous events need a pair-gossip schedule".into(),
            ))
        }
    };
    let dim = states[0].x.len();
    let mut mean = super::mean_model(states);

    let grad = ctx.oracle.sample_gradient(i, &states[i].x, k)?;
    let tau = staleness_draw(ctx.seed, k, ctx.max_staleness);
    let due = k + tau;
    let queue = &mut states[i].stale_queue;
    let pos = queue.partition_point(|g| g.due <= due);
    queue.insert(
        pos,
        StaleGradient {
            inserted: k,
            due,
            grad,
        },
    );

    guard.check(k, states.iter().map(|s| s.x.as_slice()), ctx.codec.theta)?;
    let codec = ctx.codec;
    let hashes = guard.hashes();
    let encode = |w: usize, x: &[f64]| {
        let err = |source| AlgoError::Codec {
            k,
            receiver: w,
            sender: w,
            source,
        };
        let g = codec.grid_indices(x, k, w, &ctx.rounding).map_err(err)?;
        Ok::<_, AlgoError>((codec.message_from_indices(&g, hashes).map_err(err)?, codec.self_bias_from_indices(&g)))
    };
    let (msg_i, own_i) = encode(i, &states[i].x)?;
    let (msg_j, own_j) = encode(j, &states[j].x)?;
    let lift = |receiver: usize, sender: usize, msg, x_ref: &[f64]| {
        codec.decode_remote(msg, x_ref).map_err(|source| AlgoError::Codec {
            k,
            receiver,
            sender,
            source,
        })
    };
    let j_at_i = lift(i, j, &msg_j, &states[i].x)?;
    let i_at_j = lift(j, i, &msg_i, &states[j].x)?;
    for c in 0..dim {
        states[i].x[c] += 0.5 * (j_at_i[c] - own_i[c]);
        states[j].x[c] += 0.5 * (i_at_j[c] - own_j[c]);
    }

    let mut applied = 0;
    let scale = alpha / n as f64;
    for s in states.iter_mut() {
        while s.stale_queue.front().is_some_and(|g| g.due <= k) {
            let g = s.stale_queue.pop_front().expect("front exists");
            for c in 0..dim {
                s.x[c] -= alpha * g.grad[c];
                mean[c] -= scale * g.grad[c];
            }
            applied += 1;
        }
    }
    Ok(EventOutcome {
        initiator: i,
        peer: j,
        tau,
        applied,
        bits: msg_i.payload_bits() + msg_j.payload_bits(),
        expected_mean: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::{init_states, mean_model, GuardMode};
    use crate::objectives::{least_squares, GradOracle};
    use crate::quant::QuantizerSpec;
    use crate::topo::PairSampler;

    #[test]
    fn no_staleness_complete_exact_matches_serial_reference() {
        let n = 4;
        let oracle = GradOracle::new(least_squares(n, 3, 6, 0.2, 1).unwrap(), 2);
        let schedule = GossipSchedule::new(n, PairSampler::CompletePair, 5, 1).unwrap();
        let codec = ModuloCodec::new(1.0, QuantizerSpec::exact()).unwrap();
        let ctx = AsyncContext {
            schedule: &schedule,
            codec: &codec,
            oracle: &oracle,
            rounding: SharedSeed::new(0),
            seed: 9,
            max_staleness: 0,
        };
        let mut st = init_states(n, 3);
        let mut guard = ConsensusGuard::new(GuardMode::Off);
        let mut reference = vec![vec![0.0; 3]; n];
        for k in 0..500 {
            event_moniqua_adpsgd(&mut st, &ctx, 0.05, &mut guard, k).unwrap();
            let (i, j) = match schedule.event(k) {
                GossipEvent::Pair { initiator, peer } => (initiator, peer),
                GossipEvent::Dense => unreachable!(),
            };
            let g = oracle.sample_gradient(i, &reference[i], k).unwrap();
            let (xi, xj) = (reference[i].clone(), reference[j].clone());
            for c in 0..3 {
                reference[i][c] = xi[c] + 0.5 * (xj[c] - xi[c]) - 0.05 * g[c];
                reference[j][c] = xj[c] + 0.5 * (xi[c] - xj[c]);
            }
            for w in 0..n {
                for c in 0..3 {
                    assert!((st[w].x[c] - reference[w][c]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn two_workers_average_geometrically() {
        let oracle = GradOracle::new(crate::objectives::theorem1_objective(2, 1, 0.1).unwrap(), 0);
        let schedule = GossipSchedule::new(2, PairSampler::FixedPair(0, 1), 0, 1).unwrap();
        let codec = ModuloCodec::new(10.0, QuantizerSpec::exact()).unwrap();
        let ctx = AsyncContext {
            schedule: &schedule,
            codec: &codec,
            oracle: &oracle,
            rounding: SharedSeed::new(0),
            seed: 0,
            max_staleness: 0,
        };
        let mut st = init_states(2, 1);
        st[0].x = vec![1.0];
        st[1].x = vec![-3.0];
        let mut guard = ConsensusGuard::new(GuardMode::Off);
        event_moniqua_adpsgd(&mut st, &ctx, 0.0, &mut guard, 0).unwrap();
        assert_eq!(st[0].x, vec![-1.0]);
        assert_eq!(st[1].x, vec![-1.0]);
    }

    #[test]
    fn stale_gradients_apply_when_due_and_preserve_mean() {
        let n = 6;
        let oracle = GradOracle::new(least_squares(n, 2, 4, 0.1, 3).unwrap(), 4);
        let schedule = GossipSchedule::new(n, PairSampler::RingPair, 7, 1).unwrap();
        let codec = ModuloCodec::new(5.0, QuantizerSpec::nearest(1.0 / 64.0).unwrap()).unwrap();
        let ctx = AsyncContext {
            schedule: &schedule,
            codec: &codec,
            oracle: &oracle,
            rounding: SharedSeed::new(1),
            seed: 2,
            max_staleness: 4,
        };
        let mut st = init_states(n, 2);
        let mut guard = ConsensusGuard::new(GuardMode::VerifyHash);
        let mut total = 0;
        for k in 0..2000 {
            let out = event_moniqua_adpsgd(&mut st, &ctx, 0.01, &mut guard, k).unwrap();
            assert!(out.tau <= 4);
            total += out.applied;
            for (a, b) in mean_model(&st).iter().zip(&out.expected_mean) {
                assert!((a - b).abs() < 1e-12);
            }
            for s in &st {
                assert!(s.stale_queue.iter().all(|g| g.due > k && g.due - g.inserted <= 4));
            }
        }
        let pending: usize = st.iter().map(|s| s.stale_queue.len()).sum();
        assert_eq!(total + pending, 2000);
    }
}
