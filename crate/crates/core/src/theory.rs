//! Closed-form parameters for the modulo codec.
//!
//! Synchronous D-PSGD on a matrix with spectral quantity `rho`, step sizes
//! obeying `alpha_k / alpha_{k+t} <= C eta^t`, and gradient bound `G`:
//!
//! ```text
//! theta_k = 2 alpha_k G C log(16 n) / (1 - eta rho)         (appendix form: times eta)
//! delta   = (1 - eta rho) / (8 C^2 eta log(16 n) + 2 (1 - eta rho))
//! ```
//!
//! One-bit mode runs on the slack matrix `gamma W + (1 - gamma) I` with
//!
//! ```text
//! gamma = 2 / (1 - rho + 16 delta^2/(1 - 2 delta)^2 * 64 log(4n) log(K) / (1 - rho))
//! ```
//!
//! clamped to `(0, 1]`. D2 needs `lambda_2 < 1`, `lambda_n > -1/3` and uses
//!
//! ```text
//! v_n = lambda_n - sqrt(lambda_n^2 - lambda_n)
//! D1  = max{ |v_n| + 2|lambda_n|/(1 - |v_n|),  sqrt(lambda_2/(1 - lambda_2)) + 2 lambda_2/(1 - lambda_2) }
//! D2  = max{ 2/(1 - |v_n|),  2/sqrt(1 - lambda_2) }
//! theta = (6 D1 n + 8) alpha G,   delta = 1/(12 n D2 + 2)
//! ```
//!
//! Asynchronous gossip with mixing time `t` uses `theta = 16 t alpha G` and
//! `delta = 1/(64 t + 2)`. Unbiased quantization with grid spacing `d_q` and
//! no modulo step cannot drive the gradient below
//! `phi^2 d_q^2 / (8 (1 + phi^2))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algos::{init_states, step_dpsgd_full, AlgoError};
use crate::objectives::GradOracle;
use crate::topo::{CommMatrix, LogBase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{eigenvalue} = {value:.6} violates the D2 assumption (need lambda_2 < 1 and lambda_n > -1/3)")]
    D2AssumptionViolated { eigenvalue: &'static str, value: f64 },
    #[error("step schedule violates alpha_k/alpha_(k+t) <= C eta^t at k={k}, t={t}: ratio {ratio} > {bound}")]
    StepCondition { k: u64, t: u64, ratio: f64, bound: f64 },
    #[error(transparent)]
    Algo(#[from] AlgoError),
}

fn invalid(msg: String) -> TheoryError {
    TheoryError::InvalidParameter(msg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Constant,
    /// `alpha_0 / sqrt(k + 1)`.
    InvSqrt,
    /// Explicit per-iteration values; the last one repeats.
    Table(Vec<f64>),
}

/// Step sizes with the two constants of the decay condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: StepKind,
    pub alpha0: f64,
    pub c_alpha: f64,
    pub eta: f64,
}

impl StepSchedule {
    pub fn constant(alpha: f64) -> Self {
        StepSchedule {
            kind: StepKind::Constant,
            alpha0: alpha,
            c_alpha: 1.0,
            eta: 1.0,
        }
    }

    pub fn inv_sqrt(alpha0: f64, c_alpha: f64, eta: f64) -> Self {
        StepSchedule {
            kind: StepKind::InvSqrt,
            alpha0,
            c_alpha,
            eta,
        }
    }

    /// Constant step `1 / (s^(2/3) K^(1/3) + sigma sqrt(K/n) + 2L)` from the
    /// outer and inner deviations `s`, `sigma`, horizon `K` and smoothness `L`.
    pub fn tuned(varsigma: f64, sigma: f64, n: usize, iters: u64, smoothness: f64) -> Result<Self, TheoryError> {
        if n == 0 || iters == 0 || !(smoothness > 0.0) || varsigma < 0.0 || sigma < 0.0 {
            return Err(invalid(format!(
                "need n, K >= 1, L > 0 and nonnegative deviations, got n={n}, K={iters}, L={smoothness}"
            )));
        }
        let k = iters as f64;
        let denom = varsigma.powf(2.0 / 3.0) * k.cbrt() + sigma * (k / n as f64).sqrt() + 2.0 * smoothness;
        Ok(Self::constant(1.0 / denom))
    }

    pub fn alpha(&self, k: u64) -> f64 {
        match &self.kind {
            StepKind::Constant => self.alpha0,
            StepKind::InvSqrt => self.alpha0 / ((k + 1) as f64).sqrt(),
            StepKind::Table(v) => v
                .get(k as usize)
                .or(v.last())
                .copied()
                .unwrap_or(self.alpha0),
        }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(invalid(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.c_alpha >= 1.0) {
            return Err(invalid(format!("C_alpha must be >= 1, got {}", self.c_alpha)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(invalid(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if let StepKind::Table(v) = &self.kind {
            if v.is_empty() || v.iter().any(|a| !(*a > 0.0)) {
                return Err(invalid("step table must be nonempty and positive".into()));
            }
        }
        Ok(())
    }

    /// Checks `alpha_k / alpha_{k+t} <= C eta^t` for all `k, t < horizon`.
    pub fn check_decay_condition(&self, horizon: u64) -> Result<(), TheoryError> {
        for k in 0..horizon {
            let a = self.alpha(k);
            for t in 0..horizon {
                let ratio = a / self.alpha(k + t);
                let bound = self.c_alpha * self.eta.powi(t as i32);
                if ratio > bound * (1.0 + 1e-12) {
                    return Err(TheoryError::StepCondition { k, t, ratio, bound });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaForm {
    #[default]
    Main,
    Appendix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Prescribed,
    WarmupEstimated,
    Manual,
}

/// How `theta_k` follows the step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaRule {
    /// `theta_k = coefficient * alpha_k`.
    PerAlpha(f64),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub theta: ThetaRule,
    pub delta: f64,
    pub gamma: Option<f64>,
    pub g_inf: f64,
    pub provenance: Provenance,
}

impl TheoryParams {
    pub fn theta_at(&self, alpha_k: f64) -> f64 {
        match self.theta {
            ThetaRule::PerAlpha(c) => c * alpha_k,
            ThetaRule::Fixed(t) => t,
        }
    }
}

fn check_rho(rho: f64) -> Result<(), TheoryError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(invalid(format!("need 0 <= rho < 1, got {rho}")));
    }
    Ok(())
}

fn check_g(g_inf: f64) -> Result<(), TheoryError> {
    if !(g_inf > 0.0 && g_inf.is_finite()) {
        return Err(invalid(format!(
            "gradient bound must be positive, got {g_inf}; supply it manually"
        )));
    }
    Ok(())
}

/// `gap / (8 C^2 eta log16n + 2 gap)` with `gap = 1 - eta rho`.
pub fn dpsgd_delta(gap: f64, c_alpha: f64, eta: f64, log16n: f64) -> f64 {
    gap / (8.0 * c_alpha * c_alpha * eta * log16n + 2.0 * gap)
}

/// Synchronous D-PSGD parameters.
pub fn dpsgd_params(
    n: usize,
    rho: f64,
    schedule: &StepSchedule,
    g_inf: f64,
    base: LogBase,
    form: ThetaForm,
) -> Result<TheoryParams, TheoryError> {
    check_rho(rho)?;
    check_g(g_inf)?;
    schedule.validate()?;
    if n == 0 {
        return Err(invalid("n must be positive".into()));
    }
    let (c, eta) = (schedule.c_alpha, schedule.eta);
    let log16n = base.log(16.0 * n as f64);
    let gap = 1.0 - eta * rho;
    let mut coef = 2.0 * g_inf * c * log16n / gap;
    if form == ThetaForm::Appendix {
        coef *= eta;
    }
    Ok(TheoryParams {
        theta: ThetaRule::PerAlpha(coef),
        delta: dpsgd_delta(gap, c, eta, log16n),
        gamma: None,
        g_inf,
        provenance: Provenance::Prescribed,
    })
}

/// Slack ratio for one-bit quantization over `iters` iterations.
pub fn one_bit_gamma(rho: f64, delta: f64, n: usize, iters: u64, base: LogBase) -> Result<f64, TheoryError> {
    check_rho(rho)?;
    if !(0.0..0.5).contains(&delta) || n == 0 || iters < 2 {
        return Err(invalid(format!(
            "need 0 <= delta < 1/2, n >= 1, K >= 2, got delta={delta}, n={n}, K={iters}"
        )));
    }
    let gap = 1.0 - rho;
    let q = 16.0 * delta * delta / (1.0 - 2.0 * delta).powi(2);
    let mix = 64.0 * base.log(4.0 * n as f64) * base.log(iters as f64) / gap;
    let gamma = 2.0 / (gap + q * mix);
    if !(gamma > 0.0) {
        return Err(invalid(format!("slack ratio evaluates to {gamma}")));
    }
    Ok(gamma.min(1.0))
}

/// One-bit parameters: `delta = 1/4`, the slack ratio, and the synchronous
/// `theta` rule evaluated on the slack matrix's `rho`.
pub fn one_bit_params(
    n: usize,
    rho: f64,
    iters: u64,
    schedule: &StepSchedule,
    g_inf: f64,
    base: LogBase,
    form: ThetaForm,
) -> Result<TheoryParams, TheoryError> {
    let delta = 0.25;
    let gamma = one_bit_gamma(rho, delta, n, iters, base)?;
    let slack_rho = gamma * rho + 1.0 - gamma;
    let mut p = dpsgd_params(n, slack_rho, schedule, g_inf, base, form)?;
    p.delta = delta;
    p.gamma = Some(gamma);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct D2Constants {
    /// `|v_n|`; when `0 < lambda_n` the root is complex and its modulus
    /// `sqrt(lambda_n)` is used.
    pub v_n_abs: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn d2_constants(m: &CommMatrix) -> Result<D2Constants, TheoryError> {
    d2_constants_from(m.lambda2(), m.lambda_n())
}

pub fn d2_constants_from(lambda2: f64, lambda_n: f64) -> Result<D2Constants, TheoryError> {
    if !(lambda2 < 1.0) {
        return Err(TheoryError::D2AssumptionViolated {
            eigenvalue: "lambda_2",
            value: lambda2,
        });
    }
    if !(lambda_n > -1.0 / 3.0 + 1e-12) {
        return Err(TheoryError::D2AssumptionViolated {
            eigenvalue: "lambda_n",
            value: lambda_n,
        });
    }
    let disc = lambda_n * lambda_n - lambda_n;
    let v = if disc >= 0.0 {
        (lambda_n - disc.sqrt()).abs()
    } else {
        lambda_n.sqrt()
    };
    // a negative lambda_2 only occurs for near-complete graphs; its magnitude enters
    let l2 = lambda2.abs();
    let r = l2 / (1.0 - l2);
    let d1 = (v + 2.0 * lambda_n.abs() / (1.0 - v)).max(r.sqrt() + 2.0 * r);
    let d2 = (2.0 / (1.0 - v)).max(2.0 / (1.0 - l2).sqrt());
    Ok(D2Constants { v_n_abs: v, d1, d2 })
}

/// D2 parameters for constant step size.
pub fn d2_params(m: &CommMatrix, g_inf: f64) -> Result<TheoryParams, TheoryError> {
    check_g(g_inf)?;
    let c = d2_constants(m)?;
    let n = m.n() as f64;
    Ok(TheoryParams {
        theta: ThetaRule::PerAlpha((6.0 * c.d1 * n + 8.0) * g_inf),
        delta: 1.0 / (12.0 * n * c.d2 + 2.0),
        gamma: None,
        g_inf,
        provenance: Provenance::Prescribed,
    })
}

/// Asynchronous gossip parameters for mixing time `tmix` (events).
pub fn adpsgd_params(tmix: usize, g_inf: f64) -> Result<TheoryParams, TheoryError> {
    if tmix < 1 {
        return Err(invalid("tmix must be >= 1".into()));
    }
    check_g(g_inf)?;
    let t = tmix as f64;
    Ok(TheoryParams {
        theta: ThetaRule::PerAlpha(16.0 * t * g_inf),
        delta: 1.0 / (64.0 * t + 2.0),
        gamma: None,
        g_inf,
        provenance: Provenance::Prescribed,
    })
}

/// Lower bound on the expected squared gradient under unbiased quantization
/// with grid spacing `delta_q` on a matrix with smallest positive entry `phi`.
pub fn theorem1_floor(phi: f64, delta_q: f64) -> f64 {
    let p2 = phi * phi;
    p2 * delta_q * delta_q / (8.0 * (1.0 + p2))
}

/// `safety * max |g|_inf` over the sampled gradients of a full-precision
/// D-PSGD warmup on `m`.
pub fn estimate_g_inf(
    oracle: &GradOracle,
    m: &CommMatrix,
    schedule: &StepSchedule,
    warmup_iters: u64,
    safety: f64,
) -> Result<f64, TheoryError> {
    if warmup_iters < 1 || !(safety > 0.0) {
        return Err(invalid(format!(
            "warmup needs at least one iteration and a positive safety factor, got {warmup_iters}, {safety}"
        )));
    }
    let n = oracle.n();
    let mut states = init_states(n, oracle.dim());
    let mut best = 0.0f64;
    for k in 0..warmup_iters {
        let grads = (0..n)
            .map(|i| oracle.sample_gradient(i, &states[i].x, k))
            .collect::<Result<Vec<_>, _>>()
            .map_err(AlgoError::from)?;
        for g in &grads {
            best = g.iter().fold(best, |acc, v| acc.max(v.abs()));
        }
        step_dpsgd_full(&mut states, m, schedule.alpha(k), &grads)?;
    }
    Ok(safety * best)
}
