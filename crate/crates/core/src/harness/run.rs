//! Turning a configuration into a run.
//!
//! [`prepare`] resolves everything a run needs: the communication matrix
//! (with slack applied in one-bit mode), the objective and its gradient
//! oracle, the step schedule, the theory parameters and the quantizer. When
//! the gradient bound is not given it is estimated from a full-precision
//! warmup, and for asynchronous gossip the mixing window is calibrated on the
//! run's own pair schedule. [`run_prepared`] then iterates and records
//! metrics every `record_every` iterations, always including the first and
//! the last state.
//!
//! After every step the mean model is compared with the stepper's expected
//! mean:
//!
//! ```text
//! | mean(X_{k+1}) - expected |_inf <= 1e-12 * max(1, |expected|_inf)
//! ```

use rayon::prelude::*;
use serde::Serialize;

use crate::algos::adpsgd::{event_moniqua_adpsgd, AsyncContext};
use crate::algos::sync::{step_dpsgd_full, step_dpsgd_naive, step_moniqua, step_moniqua_d2, StepOutcome};
use crate::algos::{
    consensus_inf_states, consensus_l2, init_states, mean_model, AlgoError, Algorithm, ConsensusGuard,
    Violation, WorkerState,
};
use crate::codec::ModuloCodec;
use crate::objectives::{
    hetero_quadratic, least_squares, logistic, theorem1_objective, GradOracle, ObjectiveKind,
};
use crate::quant::{QuantizerKind, QuantizerSpec, SharedSeed};
use crate::theory::{
    adpsgd_params, d2_constants, d2_params, dpsgd_params, estimate_g_inf, one_bit_gamma, D2Constants,
    Provenance, StepSchedule, TheoryParams, ThetaRule,
};
use crate::topo::{
    calibrate_tmix, complete_matrix, load_matrix_file, ring_matrix, slack_matrix, CommMatrix,
    GossipSchedule, PairSampler,
};

use super::config::{ExperimentConfig, StepKindConfig, TopologyKind};
use super::trace::{MetricsRecord, MetricsTrace, TraceHeader};
use super::HarnessError;

/// Relative tolerance of the mean-preservation check.
pub const MEAN_TOL: f64 = 1e-12;

/// Everything resolved from a configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    /// The topology as configured.
    pub base_matrix: CommMatrix,
    /// The matrix the run gossips with; the slack matrix in one-bit mode.
    pub matrix: CommMatrix,
    pub oracle: GradOracle,
    pub steps: StepSchedule,
    /// Present for modulo-coded algorithms.
    pub params: Option<TheoryParams>,
    pub quantizer: QuantizerSpec,
    pub gossip: Option<GossipSchedule>,
    pub d2: Option<D2Constants>,
}

impl Prepared {
    /// Codec for the exchange at iteration `k`.
    pub fn codec_at(&self, k: u64) -> Result<Option<ModuloCodec>, HarnessError> {
        match &self.params {
            Some(p) => Ok(Some(ModuloCodec::new(
                p.theta_at(self.steps.alpha(k)),
                self.quantizer,
            )?)),
            None => Ok(None),
        }
    }

    pub fn bits_per_coord(&self) -> Result<Option<u32>, HarnessError> {
        Ok(self.codec_at(0)?.map(|c| c.bits_per_coord))
    }
}

fn build_matrix(cfg: &ExperimentConfig) -> Result<CommMatrix, HarnessError> {
    Ok(match cfg.topology {
        TopologyKind::Ring => ring_matrix(cfg.n, false)?,
        TopologyKind::RingLazy => ring_matrix(cfg.n, true)?,
        TopologyKind::Complete => complete_matrix(cfg.n)?,
        TopologyKind::Custom => {
            let path = cfg.topology_file.as_ref().expect("validated");
            let m = load_matrix_file(path)?;
            if m.n() != cfg.n {
                return Err(HarnessError::Invalid {
                    key: "n".into(),
                    msg: format!("matrix file has {} workers, config says {}", m.n(), cfg.n),
                });
            }
            m
        }
    })
}

fn build_oracle(cfg: &ExperimentConfig) -> Result<GradOracle, HarnessError> {
    let o = &cfg.objective;
    let seed = cfg.data_seed();
    let objective = match o.kind {
        ObjectiveKind::Theorem1Quadratic => theorem1_objective(cfg.n, o.dim, o.delta_q)?,
        ObjectiveKind::HeteroQuadratic => {
            hetero_quadratic(cfg.n, o.dim, o.spread, o.curvature_spread, o.noise_b, seed)?
        }
        ObjectiveKind::LeastSquares => least_squares(cfg.n, o.dim, o.samples, o.noise_b, seed)?,
        ObjectiveKind::Logistic => logistic(cfg.n, o.dim, o.samples, o.ridge, o.noise_b, seed)?,
    };
    Ok(GradOracle::new(objective, cfg.seed))
}

fn build_steps(cfg: &ExperimentConfig, oracle: &GradOracle) -> Result<StepSchedule, HarnessError> {
    let s = &cfg.step;
    let mut sched = match s.kind {
        StepKindConfig::Constant => StepSchedule::constant(s.alpha),
        StepKindConfig::InvSqrt => StepSchedule::inv_sqrt(s.alpha, s.c_alpha, s.eta),
        StepKindConfig::Tuned => {
            let obj = &oracle.objective;
            let zero = vec![0.0; oracle.dim()];
            StepSchedule::tuned(
                obj.outer_variance(&zero)?.sqrt(),
                obj.sigma_sq().sqrt(),
                cfg.n,
                cfg.iters.max(1),
                obj.smoothness(),
            )?
        }
    };
    sched.c_alpha = s.c_alpha;
    sched.eta = s.eta;
    sched.validate()?;
    Ok(sched)
}

/// Resolves a configuration. Errors here are configuration errors.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    cfg.validate()?;
    let base = build_matrix(cfg)?;
    let oracle = build_oracle(cfg)?;
    let steps = build_steps(cfg, &oracle)?;
    let t = &cfg.theory;

    let d2 = match cfg.algorithm {
        Algorithm::MoniquaD2 => Some(d2_constants(&base)?),
        _ => None,
    };

    let gossip = if cfg.algorithm == Algorithm::MoniquaAdpsgd {
        let sampler = match cfg.topology {
            TopologyKind::Complete => PairSampler::CompletePair,
            _ => PairSampler::RingPair,
        };
        let s = GossipSchedule::new(cfg.n, sampler, cfg.seed, 1)?;
        let tmix = match cfg.asynchronous.tmix {
            Some(t) => t,
            None => calibrate_tmix(&s, cfg.asynchronous.calibration_trials, cfg.asynchronous.max_tmix)?,
        };
        Some(s.with_tmix(tmix)?)
    } else {
        None
    };

    let mut matrix = base.clone();
    let params = if cfg.algorithm.uses_codec() {
        // a manual theta makes the gradient bound irrelevant
        let (g_inf, provenance) = match (t.g_inf, t.theta) {
            (Some(g), _) => (g, Provenance::Prescribed),
            (None, Some(_)) => (1.0, Provenance::Manual),
            (None, None) => (
                estimate_g_inf(&oracle, &base, &steps, t.warmup_iters, t.safety)?,
                Provenance::WarmupEstimated,
            ),
        };
        let mut p = match cfg.algorithm {
            Algorithm::Moniqua if t.one_bit => {
                let gamma = match t.gamma {
                    Some(g) => g,
                    None => one_bit_gamma(base.rho(), 0.25, cfg.n, cfg.iters.max(2), t.log_base)?,
                };
                matrix = slack_matrix(&base, gamma)?;
                let mut p = dpsgd_params(cfg.n, matrix.rho(), &steps, g_inf, t.log_base, t.theta_form)?;
                p.delta = 0.25;
                p.gamma = Some(gamma);
                p
            }
            Algorithm::Moniqua => {
                if let Some(gamma) = t.gamma {
                    matrix = slack_matrix(&base, gamma)?;
                }
                let mut p = dpsgd_params(cfg.n, matrix.rho(), &steps, g_inf, t.log_base, t.theta_form)?;
                p.gamma = t.gamma;
                p
            }
            Algorithm::MoniquaD2 => d2_params(&base, g_inf)?,
            Algorithm::MoniquaAdpsgd => {
                adpsgd_params(gossip.as_ref().expect("built above").tmix(), g_inf)?
            }
            _ => unreachable!("codec algorithms only"),
        };
        p.provenance = provenance;
        if let Some(theta) = t.theta {
            p.theta = ThetaRule::Fixed(theta);
            p.provenance = Provenance::Manual;
        }
        if let Some(delta) = t.delta {
            p.delta = delta;
        }
        if provenance == Provenance::Manual {
            p.g_inf = 0.0;
        }
        Some(p)
    } else {
        None
    };

    let q = &cfg.quantizer;
    let quantizer = match (q.step, &params) {
        (Some(step), _) => QuantizerSpec::new(q.kind, step, q.keep_prob, q.randomness)?,
        (None, Some(p)) => QuantizerSpec::for_delta(q.kind, p.delta, q.randomness)?,
        (None, None) => match q.kind {
            QuantizerKind::RandomizedGossip => QuantizerSpec::new(q.kind, 0.0, q.keep_prob, q.randomness)?,
            _ => QuantizerSpec::exact(),
        },
    };

    let prepared = Prepared {
        config: cfg.clone(),
        base_matrix: base,
        matrix,
        oracle,
        steps,
        params,
        quantizer,
        gossip,
        d2,
    };
    // surfaces codec parameter problems before any iteration runs
    prepared.codec_at(0)?;
    Ok(prepared)
}

/// Result of a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: MetricsTrace,
    pub states: Vec<WorkerState>,
    pub violations: Vec<Violation>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    /// Largest mean-preservation error seen, relative to `max(1, |mean|_inf)`.
    pub max_mean_error: f64,
    /// The same error without the scaling.
    pub max_mean_abs_error: f64,
    /// Largest pre-exchange spread the guard saw.
    pub max_guard_distance: f64,
    pub bits_cum: u64,
    pub gradient_samples: u64,
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    run_prepared(&prepare(cfg)?)
}

struct Recorder<'a> {
    prep: &'a Prepared,
    records: Vec<MetricsRecord>,
}

impl Recorder<'_> {
    fn record(
        &mut self,
        k: u64,
        states: &[WorkerState],
        bits: u64,
        violations: usize,
    ) -> Result<(), HarnessError> {
        let obj = &self.prep.oracle.objective;
        let mean = mean_model(states);
        let grad = obj.gradient(&mean)?;
        let theta_k = match &self.prep.params {
            Some(p) => p.theta_at(self.prep.steps.alpha(k)),
            None => 0.0,
        };
        self.records.push(MetricsRecord {
            k,
            loss: obj.value(&mean)?,
            grad_norm_sq: grad.iter().map(|g| g * g).sum(),
            consensus_inf: consensus_inf_states(states).distance,
            consensus_l2: consensus_l2(states),
            theta_k,
            bits_cum: bits,
            violations: violations as u64,
        });
        Ok(())
    }
}

/// `(absolute, relative)` mean-preservation error.
fn mean_error(states: &[WorkerState], expected: &[f64]) -> (f64, f64) {
    let mean = mean_model(states);
    let scale = expected.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let abs = mean
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (abs, abs / scale)
}

/// Runs a prepared experiment.
pub fn run_prepared(prep: &Prepared) -> Result<RunOutput, HarnessError> {
    let cfg = &prep.config;
    let n = cfg.n;
    let dim = prep.oracle.dim();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::Io(format!("thread pool: {e}")))?;
    let rounding = SharedSeed::new(cfg.seed);
    let mut guard = ConsensusGuard::new(cfg.guard);
    let mut states = init_states(n, dim);
    let mut rec = Recorder {
        prep,
        records: Vec::new(),
    };
    let mut bits: u64 = 0;
    let mut max_mean_error = 0.0f64;
    let mut max_mean_abs_error = 0.0f64;
    rec.record(0, &states, 0, 0)?;

    let runtime = |k: u64| move |source: AlgoError| HarnessError::Runtime { k, source };
    let mut check_mean = |k: u64, states: &[WorkerState], expected: Option<&[f64]>| {
        if let Some(e) = expected {
            let (abs, err) = mean_error(states, e);
            max_mean_abs_error = max_mean_abs_error.max(abs);
            max_mean_error = max_mean_error.max(err);
            if err > MEAN_TOL {
                return Err(HarnessError::MeanDrift { k, error: err });
            }
        }
        Ok(())
    };

    for k in 0..cfg.iters {
        let alpha = prep.steps.alpha(k);
        if let Some(gossip) = &prep.gossip {
            let codec = prep.codec_at(k)?.expect("asynchronous runs use the codec");
            let ctx = AsyncContext {
                schedule: gossip,
                codec: &codec,
                oracle: &prep.oracle,
                rounding,
                seed: cfg.seed,
                max_staleness: cfg.asynchronous.staleness,
            };
            let out = event_moniqua_adpsgd(&mut states, &ctx, alpha, &mut guard, k).map_err(runtime(k))?;
            bits += out.bits;
            check_mean(k, &states, Some(&out.expected_mean))?;
        } else {
            let grads = pool
                .install(|| {
                    (0..n)
                        .into_par_iter()
                        .map(|i| prep.oracle.sample_gradient(i, &states[i].x, k))
                        .collect::<Result<Vec<_>, _>>()
                })
                .map_err(|e| HarnessError::Runtime {
                    k,
                    source: e.into(),
                })?;
            let m = &prep.matrix;
            let out: StepOutcome = match cfg.algorithm {
                Algorithm::Dpsgd => step_dpsgd_full(&mut states, m, alpha, &grads),
                Algorithm::DpsgdNaive => {
                    step_dpsgd_naive(&mut states, m, k, alpha, &grads, &prep.quantizer, &rounding)
                }
                Algorithm::Moniqua => {
                    let codec = prep.codec_at(k)?.expect("codec algorithm");
                    step_moniqua(&mut states, m, &codec, k, alpha, &grads, &rounding, &mut guard)
                }
                Algorithm::MoniquaD2 => {
                    let codec = prep.codec_at(k)?.expect("codec algorithm");
                    step_moniqua_d2(&mut states, m, &codec, k, alpha, &grads, &rounding, &mut guard)
                }
                Algorithm::MoniquaAdpsgd => unreachable!("handled by the gossip branch"),
            }
            .map_err(runtime(k))?;
            bits += out.bits;
            check_mean(k, &states, out.expected_mean.as_deref())?;
        }
        let done = k + 1;
        if done % cfg.record_every == 0 || done == cfg.iters {
            rec.record(done, &states, bits, guard.violations.len())?;
        }
    }

    let trace = MetricsTrace {
        header: TraceHeader {
            config_digest: cfg.digest(),
            seed: cfg.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            algorithm: cfg.algorithm.as_str().to_string(),
        },
        records: rec.records,
    };
    Ok(RunOutput {
        trace,
        states,
        summary: RunSummary {
            max_mean_error,
            max_mean_abs_error,
            max_guard_distance: guard.max_distance,
            bits_cum: bits,
            gradient_samples: prep.oracle.samples(),
        },
        violations: guard.violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    fn cfg(text: &str) -> ExperimentConfig {
        parse_config(text).unwrap()
    }

    #[test]
    fn zero_iterations_records_initial_state_only() {
        let out = run(&cfg("iters = 0\nalgorithm = dpsgd\n")).unwrap();
        assert_eq!(out.trace.records.len(), 1);
        assert_eq!(out.trace.records[0].k, 0);
        assert_eq!(out.trace.records[0].bits_cum, 0);
    }

    #[test]
    fn d2_on_uniform_ring_is_rejected() {
        let err = prepare(&cfg("algorithm = moniqua_d2\ntopology = ring\n")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("lambda_n"), "{err}");
        assert!(prepare(&cfg("algorithm = moniqua_d2\ntopology = ring_lazy\ntheory.g_inf = 1\n")).is_ok());
    }

    #[test]
    fn records_cover_first_and_last() {
        let out = run(&cfg("iters = 25\nrecord_every = 10\nalgorithm = dpsgd\n")).unwrap();
        let ks: Vec<u64> = out.trace.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 10, 20, 25]);
    }

    #[test]
    fn threads_do_not_change_the_trace() {
        let base = "iters = 60\nrecord_every = 1\nobjective.noise_b = 0.3\nquantizer.kind = stochastic_round\n";
        let a = run(&cfg(base)).unwrap();
        let b = run(&cfg(&format!("{base}threads = 4\n"))).unwrap();
        assert_eq!(a.trace.records, b.trace.records);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn bits_follow_link_count() {
        let out = run(&cfg(
            "iters = 7\nn = 5\nobjective.dim = 3\nquantizer.kind = nearest_round\nquantizer.step = 0.01\ntheory.theta = 1\n",
        ))
        .unwrap();
        // 5 workers on a ring, two neighbors each, 3 coordinates, 7 bits per code
        assert_eq!(out.summary.bits_cum, 7 * 5 * 2 * 3 * 7);
    }

    #[test]
    fn warmup_provenance_and_manual_theta() {
        let p = prepare(&cfg("iters = 10\n")).unwrap();
        let params = p.params.unwrap();
        assert_eq!(params.provenance, Provenance::WarmupEstimated);
        assert!(params.g_inf > 0.0);
        assert!(p.quantizer.delta() <= params.delta);
        let p = prepare(&cfg("theory.theta = 2\n")).unwrap();
        assert_eq!(p.params.unwrap().theta, ThetaRule::Fixed(2.0));
        assert_eq!(p.params.unwrap().provenance, Provenance::Manual);
    }

    #[test]
    fn one_bit_uses_slack_matrix_and_two_levels() {
        let p = prepare(&cfg("iters = 100\ntheory.one_bit = true\nquantizer.kind = nearest_round\ntheory.g_inf = 1\n")).unwrap();
        let gamma = p.params.unwrap().gamma.unwrap();
        assert!((p.matrix.rho() - (gamma * p.base_matrix.rho() + 1.0 - gamma)).abs() < 1e-12);
        assert_eq!(p.bits_per_coord().unwrap(), Some(1));
    }

    #[test]
    fn async_runs_calibrate_tmix() {
        let p = prepare(&cfg(
            "algorithm = moniqua_adpsgd\nn = 6\nasync.calibration_trials = 500\ntheory.g_inf = 1\n",
        ))
        .unwrap();
        let tmix = p.gossip.as_ref().unwrap().tmix();
        assert!(tmix >= 2);
        let out = run_prepared(&p).unwrap();
        assert!(out.summary.max_mean_error <= MEAN_TOL);
    }
}
