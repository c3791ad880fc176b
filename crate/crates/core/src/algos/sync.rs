//! Synchronous steppers: D-PSGD, naively quantized D-PSGD, modulo-coded
//! D-PSGD and modulo-coded D2.

use crate::codec::{EncodedMessage, ModuloCodec};
use crate::quant::{QuantizerSpec, SharedSeed};
use crate::topo::CommMatrix;

use super::{check_dims, mean_model, AlgoError, ConsensusGuard, WorkerState};

/// Result of one synchronous iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Payload bits sent over all links this iteration.
    pub bits: u64,
    /// The average model the update must produce exactly, for steppers whose
    /// exchange preserves the average. `None` for the naive stepper, which
    /// only preserves it in expectation.
    pub expected_mean: Option<Vec<f64>>,
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    let n = vs.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// `mean(base) - alpha mean(grads)`.
fn drifted_mean(base: Vec<f64>, grads: &[Vec<f64>], alpha: f64) -> Vec<f64> {
    let g = mean_of(grads);
    base.iter().zip(&g).map(|(x, g)| x - alpha * g).collect()
}

fn check_matrix(states: &[WorkerState], m: &CommMatrix) -> Result<(), AlgoError> {
    if m.n() != states.len() {
        return Err(AlgoError::State(format!(
            "matrix has {} workers, state has {}",
            m.n(),
            states.len()
        )));
    }
    Ok(())
}

/// Full-precision D-PSGD: `X_{k+1} = X_k W - alpha G_k`.
pub fn step_dpsgd_full(
    states: &mut [WorkerState],
    m: &CommMatrix,
    alpha: f64,
    grads: &[Vec<f64>],
) -> Result<StepOutcome, AlgoError> {
    let dim = check_dims(states, grads)?;
    check_matrix(states, m)?;
    let expected = drifted_mean(mean_model(states), grads, alpha);
    let xs: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
    for (i, s) in states.iter_mut().enumerate() {
        let mut acc = vec![0.0; dim];
        for &(j, w) in m.neighbors(i) {
            for c in 0..dim {
                acc[c] += (xs[j][c] - xs[i][c]) * w;
            }
        }
        for c in 0..dim {
            s.x[c] = xs[i][c] + acc[c] - alpha * grads[i][c];
        }
    }
    Ok(StepOutcome {
        bits: m.link_count() as u64 * dim as u64 * 64,
        expected_mean: Some(expected),
    })
}

/// D-PSGD where neighbors see `Q(x_j)` and each worker keeps its own `x_i`.
/// The sender quantizes once per iteration with offsets drawn for worker `j`
/// (or shared, per the quantizer's policy). Grid indices are unbounded, so
/// the bit count charges 64 bits per coordinate.
#[allow(clippy::too_many_arguments)]
pub fn step_dpsgd_naive(
    states: &mut [WorkerState],
    m: &CommMatrix,
    k: u64,
    alpha: f64,
    grads: &[Vec<f64>],
    q: &QuantizerSpec,
    seed: &SharedSeed,
) -> Result<StepOutcome, AlgoError> {
    let dim = check_dims(states, grads)?;
    check_matrix(states, m)?;
    let quantized: Vec<Vec<f64>> = states
        .iter()
        .enumerate()
        .map(|(j, s)| {
            s.x.iter()
                .enumerate()
                .map(|(c, &v)| q.apply(v, seed.offset(q.randomness, k, j, c)))
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| AlgoError::State(format!("worker {j}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let xs: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
    for (i, s) in states.iter_mut().enumerate() {
        let mut acc = vec![0.0; dim];
        for &(j, w) in m.neighbors(i) {
            for c in 0..dim {
                acc[c] += (quantized[j][c] - xs[i][c]) * w;
            }
        }
        for c in 0..dim {
            s.x[c] = xs[i][c] + acc[c] - alpha * grads[i][c];
        }
    }
    Ok(StepOutcome {
        bits: m.link_count() as u64 * dim as u64 * 64,
        expected_mean: None,
    })
}

/// Encodes every worker's `values` once, lets each receiver lift its
/// neighbors' messages against its own value, and returns
/// `sum_{j in N_i} (xh_j - xh_i) W_ji` per worker together with the bits sent.
fn modulo_exchange(
    values: &[Vec<f64>],
    m: &CommMatrix,
    codec: &ModuloCodec,
    k: u64,
    seed: &SharedSeed,
    guard: &mut ConsensusGuard,
) -> Result<(Vec<Vec<f64>>, u64), AlgoError> {
    guard.check(k, values.iter().map(Vec::as_slice), codec.theta)?;
    let hashes = guard.hashes();
    let dim = values[0].len();
    let mut messages: Vec<EncodedMessage> = Vec::with_capacity(values.len());
    let mut own: Vec<Vec<f64>> = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        let err = |source| AlgoError::Codec {
            k,
            receiver: i,
            sender: i,
            source,
        };
        let g = codec.grid_indices(v, k, i, seed).map_err(err)?;
        messages.push(codec.message_from_indices(&g, hashes).map_err(err)?);
        own.push(codec.self_bias_from_indices(&g));
    }
    let mut increments = Vec::with_capacity(values.len());
    let mut bits = 0u64;
    for (i, v) in values.iter().enumerate() {
        let mut acc = vec![0.0; dim];
        for &(j, w) in m.neighbors(i) {
            let xh = codec
                .decode_remote(&messages[j], v)
                .map_err(|source| AlgoError::Codec {
                    k,
                    receiver: i,
                    sender: j,
                    source,
                })?;
            for c in 0..dim {
                acc[c] += (xh[c] - own[i][c]) * w;
            }
            bits += messages[j].payload_bits();
        }
        increments.push(acc);
    }
    Ok((increments, bits))
}

/// Modulo-coded D-PSGD for iteration `k` with the codec's `theta_k`.
#[allow(clippy::too_many_arguments)]
pub fn step_moniqua(
    states: &mut [WorkerState],
    m: &CommMatrix,
    codec: &ModuloCodec,
    k: u64,
    alpha: f64,
    grads: &[Vec<f64>],
    seed: &SharedSeed,
    guard: &mut ConsensusGuard,
) -> Result<StepOutcome, AlgoError> {
    let dim = check_dims(states, grads)?;
    check_matrix(states, m)?;
    let expected = drifted_mean(mean_model(states), grads, alpha);
    let xs: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
    let (acc, bits) = modulo_exchange(&xs, m, codec, k, seed, guard)?;
    for (i, s) in states.iter_mut().enumerate() {
        for c in 0..dim {
            s.x[c] = xs[i][c] + acc[i][c] - alpha * grads[i][c];
        }
    }
    Ok(StepOutcome {
        bits,
        expected_mean: Some(expected),
    })
}

/// Modulo-coded D2: extrapolate, then exchange the half-step models. The
/// stored previous model and gradient start at zero, so the first iteration
/// is a plain gradient step followed by the exchange.
#[allow(clippy::too_many_arguments)]
pub fn step_moniqua_d2(
    states: &mut [WorkerState],
    m: &CommMatrix,
    codec: &ModuloCodec,
    k: u64,
    alpha: f64,
    grads: &[Vec<f64>],
    seed: &SharedSeed,
    guard: &mut ConsensusGuard,
) -> Result<StepOutcome, AlgoError> {
    let dim = check_dims(states, grads)?;
    check_matrix(states, m)?;
    let half: Vec<Vec<f64>> = states
        .iter()
        .zip(grads)
        .map(|(s, g)| {
            (0..dim)
                .map(|c| 2.0 * s.x[c] - s.x_prev[c] - alpha * g[c] + alpha * s.g_prev[c])
                .collect()
        })
        .collect();
    let expected = mean_of(&half);
    let (acc, bits) = modulo_exchange(&half, m, codec, k, seed, guard)?;
    for (i, s) in states.iter_mut().enumerate() {
        std::mem::swap(&mut s.x_prev, &mut s.x);
        s.g_prev.copy_from_slice(&grads[i]);
        for c in 0..dim {
            s.x[c] = half[i][c] + acc[i][c];
        }
    }
    Ok(StepOutcome {
        bits,
        expected_mean: Some(expected),
    })
}
