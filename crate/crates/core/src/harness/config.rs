//! Experiment configuration.
//!
//! The format is line-oriented:
//!
//! ```text
//! # comment
//! topology = ring
//! n = 8
//! algorithm = moniqua
//!
//! [quantizer]
//! kind = nearest_round
//! step = 0.00390625
//! ```
//!
//! Keys under a `[section]` header are prefixed with `section.`; dotted keys
//! may also be written directly at the top level. Every key has a default, so
//! a config only lists what differs. Unknown keys are errors. The digest is
//! FNV-1a over the fully resolved `key=value` lines in sorted order, so two
//! configs that resolve to the same values share a digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::algos::{Algorithm, GuardMode};
use crate::objectives::ObjectiveKind;
use crate::quant::{QuantizerKind, Randomness};
use crate::theory::ThetaForm;
use crate::topo::LogBase;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Ring,
    RingLazy,
    Complete,
    Custom,
}

impl TopologyKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "ring" => Some(Self::Ring),
            "ring_lazy" => Some(Self::RingLazy),
            "complete" => Some(Self::Complete),
            "custom" => Some(Self::Custom),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::RingLazy => "ring_lazy",
            Self::Complete => "complete",
            Self::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKindConfig {
    Constant,
    InvSqrt,
    Tuned,
}

impl StepKindConfig {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Self::Constant),
            "inv_sqrt" => Some(Self::InvSqrt),
            "tuned" => Some(Self::Tuned),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::InvSqrt => "inv_sqrt",
            Self::Tuned => "tuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    /// Grid step; when absent, codec runs derive it from the prescribed delta.
    pub step: Option<f64>,
    pub keep_prob: f64,
    pub randomness: Randomness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub dim: usize,
    pub noise_b: f64,
    pub spread: f64,
    pub curvature_spread: f64,
    pub samples: usize,
    pub ridge: f64,
    pub delta_q: f64,
    /// Data seed; falls back to the run seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub kind: StepKindConfig,
    pub alpha: f64,
    pub c_alpha: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    pub theta: Option<f64>,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub g_inf: Option<f64>,
    pub log_base: LogBase,
    pub theta_form: ThetaForm,
    pub one_bit: bool,
    pub warmup_iters: u64,
    pub safety: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsyncConfig {
    pub staleness: u64,
    /// Mixing window; calibrated on the run's gossip schedule when absent.
    pub tmix: Option<usize>,
    pub calibration_trials: u64,
    pub max_tmix: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub topology: TopologyKind,
    pub n: usize,
    pub topology_file: Option<PathBuf>,
    pub algorithm: Algorithm,
    pub iters: u64,
    pub seed: u64,
    pub guard: GuardMode,
    pub record_every: u64,
    pub output: Option<PathBuf>,
    pub threads: usize,
    pub quantizer: QuantizerConfig,
    pub objective: ObjectiveConfig,
    pub step: StepConfig,
    pub theory: TheoryConfig,
    pub asynchronous: AsyncConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            topology: TopologyKind::Ring,
            n: 8,
            topology_file: None,
            algorithm: Algorithm::Moniqua,
            iters: 1000,
            seed: 0,
            guard: GuardMode::Off,
            record_every: 10,
            output: None,
            threads: 1,
            quantizer: QuantizerConfig {
                kind: QuantizerKind::StochasticRound,
                step: None,
                keep_prob: 1.0,
                randomness: Randomness::Shared,
            },
            objective: ObjectiveConfig {
                kind: ObjectiveKind::LeastSquares,
                dim: 10,
                noise_b: 0.0,
                spread: 1.0,
                curvature_spread: 1.0,
                samples: 100,
                ridge: 0.01,
                delta_q: 0.1,
                seed: None,
            },
            step: StepConfig {
                kind: StepKindConfig::Constant,
                alpha: 0.05,
                c_alpha: 1.0,
                eta: 1.0,
            },
            theory: TheoryConfig {
                theta: None,
                delta: None,
                gamma: None,
                g_inf: None,
                log_base: LogBase::Natural,
                theta_form: ThetaForm::Main,
                one_bit: false,
                warmup_iters: 50,
                safety: 2.0,
            },
            asynchronous: AsyncConfig {
                staleness: 0,
                tmix: None,
                calibration_trials: 10_000,
                max_tmix: 4096,
            },
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn opt_num<T: std::str::FromStr>(v: &str) -> Result<Option<T>, String> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn choice<T>(v: &str, parsed: Option<T>, options: &str) -> Result<T, String> {
    parsed.ok_or_else(|| format!("expected one of {options}, got {v:?}"))
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string)
}

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "topology",
    "n",
    "topology_file",
    "algorithm",
    "iters",
    "seed",
    "guard",
    "record_every",
    "output",
    "threads",
    "quantizer.kind",
    "quantizer.step",
    "quantizer.keep_prob",
    "quantizer.shared_randomness",
    "objective.kind",
    "objective.dim",
    "objective.noise_b",
    "objective.spread",
    "objective.curvature_spread",
    "objective.samples",
    "objective.ridge",
    "objective.delta_q",
    "objective.seed",
    "step.kind",
    "step.alpha",
    "step.c_alpha",
    "step.eta",
    "theory.theta",
    "theory.delta",
    "theory.gamma",
    "theory.g_inf",
    "theory.log_base",
    "theory.theta_form",
    "theory.one_bit",
    "theory.warmup_iters",
    "theory.safety",
    "async.staleness",
    "async.tmix",
    "async.calibration_trials",
    "async.max_tmix",
];

impl ExperimentConfig {
    /// Sets one key from its text value. Errors name the problem with the
    /// value; unknown keys are reported separately by the caller.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "topology" => {
                self.topology = choice(v, TopologyKind::parse(v), "ring, ring_lazy, complete, custom")?
            }
            "n" => self.n = num(v)?,
            "topology_file" => self.topology_file = Some(PathBuf::from(v)),
            "algorithm" => {
                self.algorithm = choice(
                    v,
                    Algorithm::parse(v),
                    "dpsgd, dpsgd_naive, moniqua, moniqua_d2, moniqua_adpsgd",
                )?
            }
            "iters" => self.iters = num(v)?,
            "seed" => self.seed = num(v)?,
            "guard" => self.guard = choice(v, GuardMode::parse(v), "off, assert, verify_hash")?,
            "record_every" => self.record_every = num(v)?,
            "output" => self.output = Some(PathBuf::from(v)),
            "threads" => self.threads = num(v)?,
            "quantizer.kind" => {
                self.quantizer.kind = choice(
                    v,
                    QuantizerKind::parse(v),
                    "stochastic_round, nearest_round, randomized_gossip, exact",
                )?
            }
            "quantizer.step" => self.quantizer.step = opt_num(v)?,
            "quantizer.keep_prob" => self.quantizer.keep_prob = num(v)?,
            "quantizer.shared_randomness" => {
                self.quantizer.randomness = if boolean(v)? {
                    Randomness::Shared
                } else {
                    Randomness::Independent
                }
            }
            "objective.kind" => {
                self.objective.kind = choice(
                    v,
                    ObjectiveKind::parse(v),
                    "theorem1_quadratic, hetero_quadratic, least_squares, logistic",
                )?
            }
            "objective.dim" => self.objective.dim = num(v)?,
            "objective.noise_b" => self.objective.noise_b = num(v)?,
            "objective.spread" => self.objective.spread = num(v)?,
            "objective.curvature_spread" => self.objective.curvature_spread = num(v)?,
            "objective.samples" => self.objective.samples = num(v)?,
            "objective.ridge" => self.objective.ridge = num(v)?,
            "objective.delta_q" => self.objective.delta_q = num(v)?,
            "objective.seed" => self.objective.seed = opt_num(v)?,
            "step.kind" => {
                self.step.kind = choice(v, StepKindConfig::parse(v), "constant, inv_sqrt, tuned")?
            }
            "step.alpha" => self.step.alpha = num(v)?,
            "step.c_alpha" => self.step.c_alpha = num(v)?,
            "step.eta" => self.step.eta = num(v)?,
            "theory.theta" => self.theory.theta = opt_num(v)?,
            "theory.delta" => self.theory.delta = opt_num(v)?,
            "theory.gamma" => self.theory.gamma = opt_num(v)?,
            "theory.g_inf" => self.theory.g_inf = opt_num(v)?,
            "theory.log_base" => {
                self.theory.log_base = match v {
                    "e" | "natural" => LogBase::Natural,
                    "2" => LogBase::Two,
                    _ => return Err(format!("expected e or 2, got {v:?}")),
                }
            }
            "theory.theta_form" => {
                self.theory.theta_form = match v {
                    "main" => ThetaForm::Main,
                    "appendix" => ThetaForm::Appendix,
                    _ => return Err(format!("expected main or appendix, got {v:?}")),
                }
            }
            "theory.one_bit" => self.theory.one_bit = boolean(v)?,
            "theory.warmup_iters" => self.theory.warmup_iters = num(v)?,
            "theory.safety" => self.theory.safety = num(v)?,
            "async.staleness" => self.asynchronous.staleness = num(v)?,
            "async.tmix" => self.asynchronous.tmix = opt_num(v)?,
            "async.calibration_trials" => self.asynchronous.calibration_trials = num(v)?,
            "async.max_tmix" => self.asynchronous.max_tmix = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Resolved `key -> value` text for every key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let q = &self.quantizer;
        let o = &self.objective;
        let s = &self.step;
        let t = &self.theory;
        let a = &self.asynchronous;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string());
        let values = [
            self.topology.as_str().to_string(),
            self.n.to_string(),
            path(&self.topology_file),
            self.algorithm.as_str().to_string(),
            self.iters.to_string(),
            self.seed.to_string(),
            self.guard.as_str().to_string(),
            self.record_every.to_string(),
            path(&self.output),
            self.threads.to_string(),
            q.kind.as_str().to_string(),
            opt_str(&q.step),
            q.keep_prob.to_string(),
            (q.randomness == Randomness::Shared).to_string(),
            o.kind.as_str().to_string(),
            o.dim.to_string(),
            o.noise_b.to_string(),
            o.spread.to_string(),
            o.curvature_spread.to_string(),
            o.samples.to_string(),
            o.ridge.to_string(),
            o.delta_q.to_string(),
            opt_str(&o.seed),
            s.kind.as_str().to_string(),
            s.alpha.to_string(),
            s.c_alpha.to_string(),
            s.eta.to_string(),
            opt_str(&t.theta),
            opt_str(&t.delta),
            opt_str(&t.gamma),
            opt_str(&t.g_inf),
            t.log_base.as_str().to_string(),
            match t.theta_form {
                ThetaForm::Main => "main",
                ThetaForm::Appendix => "appendix",
            }
            .to_string(),
            t.one_bit.to_string(),
            t.warmup_iters.to_string(),
            t.safety.to_string(),
            a.staleness.to_string(),
            opt_str(&a.tmix),
            a.calibration_trials.to_string(),
            a.max_tmix.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// FNV-1a 64 of [`canonical`](Self::canonical), as 16 hex digits.
    pub fn digest(&self) -> String {
        let mut h = crate::codec::FNV_OFFSET;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(crate::codec::FNV_PRIME);
        }
        format!("{h:016x}")
    }

    pub fn data_seed(&self) -> u64 {
        self.objective.seed.unwrap_or(self.seed)
    }

    /// Field-level and cross-field checks that do not need the topology's
    /// spectrum; [`super::run::prepare`] performs the rest.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |key: &str, msg: String| {
            Err(HarnessError::Invalid {
                key: key.to_string(),
                msg,
            })
        };
        if self.n == 0 {
            return bad("n", "need at least one worker".into());
        }
        if self.topology == TopologyKind::Custom && self.topology_file.is_none() {
            return bad("topology_file", "custom topology needs a matrix file".into());
        }
        if self.record_every == 0 {
            return bad("record_every", "must be >= 1".into());
        }
        if self.threads == 0 {
            return bad("threads", "must be >= 1".into());
        }
        if self.objective.dim == 0 {
            return bad("objective.dim", "must be >= 1".into());
        }
        if !(self.step.alpha > 0.0 && self.step.alpha.is_finite()) {
            return bad("step.alpha", format!("must be positive, got {}", self.step.alpha));
        }
        if let Some(d) = self.theory.delta {
            if !(d > 0.0 && d < 0.5) {
                return bad(
                    "theory.delta",
                    format!("delta = {d} outside (0, 1/2): the modulo recovery needs delta < 1/2"),
                );
            }
        }
        if let Some(theta) = self.theory.theta {
            if !(theta > 0.0 && theta.is_finite()) {
                return bad("theory.theta", format!("must be positive, got {theta}"));
            }
        }
        if let Some(g) = self.theory.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return bad("theory.gamma", format!("must be in (0, 1], got {g}"));
            }
        }
        if let Some(g) = self.theory.g_inf {
            if !(g > 0.0 && g.is_finite()) {
                return bad("theory.g_inf", format!("must be positive, got {g}"));
            }
        }
        if let Some(s) = self.quantizer.step {
            if !(s > 0.0 && s.is_finite()) {
                return bad("quantizer.step", format!("must be positive, got {s}"));
            }
        }
        if self.guard == GuardMode::VerifyHash && !self.algorithm.uses_codec() {
            return bad(
                "guard",
                format!("verify_hash needs a modulo-coded algorithm, got {}", self.algorithm.as_str()),
            );
        }
        if self.algorithm.uses_codec() && self.quantizer.kind == QuantizerKind::RandomizedGossip {
            return bad(
                "quantizer.kind",
                "randomized_gossip has no finite error bound and cannot drive the modulo codec".into(),
            );
        }
        if self.algorithm == Algorithm::DpsgdNaive
            && self.quantizer.step.is_none()
            && matches!(
                self.quantizer.kind,
                QuantizerKind::StochasticRound | QuantizerKind::NearestRound
            )
        {
            return bad("quantizer.step", "naive quantization needs an explicit grid step".into());
        }
        if self.algorithm == Algorithm::MoniquaAdpsgd
            && !matches!(self.topology, TopologyKind::Ring | TopologyKind::RingLazy | TopologyKind::Complete)
        {
            return bad("topology", "asynchronous gossip samples pairs on ring or complete topologies".into());
        }
        if self.theory.one_bit && self.algorithm != Algorithm::Moniqua {
            return bad("theory.one_bit", "one-bit mode applies to the synchronous modulo-coded stepper".into());
        }
        if self.theory.warmup_iters == 0 {
            return bad("theory.warmup_iters", "must be >= 1".into());
        }
        Ok(())
    }
}

/// Parses config text on top of the defaults and validates it.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = content.len() - content.trim_start().len();
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| HarnessError::Parse {
                line: line_no,
                column: indent + trimmed.len(),
                msg: "section header is missing ']'".into(),
            })?;
            let name = name.trim();
            if !["quantizer", "objective", "step", "theory", "async"].contains(&name) {
                return Err(HarnessError::Parse {
                    line: line_no,
                    column: indent + 2,
                    msg: format!("unknown section [{name}]"),
                });
            }
            section = name.to_string();
            continue;
        }
        let eq = content.find('=').ok_or_else(|| HarnessError::Parse {
            line: line_no,
            column: indent + trimmed.len() + 1,
            msg: "expected key = value".into(),
        })?;
        let key = content[..eq].trim();
        let value = content[eq + 1..].trim();
        let value_col = eq + 2 + (content[eq + 1..].len() - content[eq + 1..].trim_start().len());
        if key.is_empty() {
            return Err(HarnessError::Parse {
                line: line_no,
                column: indent + 1,
                msg: "empty key".into(),
            });
        }
        let full = if section.is_empty() || key.contains('.') {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if !KEYS.contains(&full.as_str()) {
            return Err(HarnessError::UnknownKey {
                key: full,
                line: line_no,
            });
        }
        cfg.set(&full, value).map_err(|msg| HarnessError::Parse {
            line: line_no,
            column: value_col,
            msg: format!("{full}: {msg}"),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
