//! Synthetic objectives and stochastic gradient oracles.
//!
//! Worker `i` holds a local loss `f_i`; the global objective is the average
//!
//! ```text
//! f(x) = (1/n) sum_i f_i(x)
//! ```
//!
//! Quadratic losses are stored as `f_i(x) = x^T H_i x / 2 - r_i^T x + s_i / 2`,
//! which covers the divergence example (`H = I`, optimum off the quantizer
//! grid), heterogeneous quadratics (`H_i = kappa_i I` with distinct centers)
//! and least squares (`H_i = A_i^T A_i / m`). Logistic regression with a ridge
//! term is the one non-quadratic loss.
//!
//! Sampled gradients add bounded uniform noise `b (2u - 1)` per coordinate, so
//!
//! ```text
//! E[g] = grad f_i(x),   E|g - grad f_i(x)|^2 = d b^2 / 3,   |g|_inf <= |grad f_i(x)|_inf + b
//! ```
//!
//! and noise draws are keyed by `(seed, k, worker, coordinate)`.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{counter_uniform, DOMAIN_GRADIENT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("diverged: worker {worker} has non-finite state at iteration {k}")]
    Diverged { worker: usize, k: u64 },
    #[error("invalid objective parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("optimum solve failed: {0}")]
    Solve(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Theorem1Quadratic,
    HeteroQuadratic,
    LeastSquares,
    Logistic,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "theorem1_quadratic" => Some(Self::Theorem1Quadratic),
            "hetero_quadratic" => Some(Self::HeteroQuadratic),
            "least_squares" => Some(Self::LeastSquares),
            "logistic" => Some(Self::Logistic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Theorem1Quadratic => "theorem1_quadratic",
            Self::HeteroQuadratic => "hetero_quadratic",
            Self::LeastSquares => "least_squares",
            Self::Logistic => "logistic",
        }
    }
}

#[derive(Debug, Clone)]
pub enum LocalLoss {
    Quadratic {
        h: DMatrix<f64>,
        r: DVector<f64>,
        s: f64,
    },
    /// `(1/m) sum log(1 + exp(-y_l a_l^T x)) + ridge |x|^2 / 2`.
    Logistic {
        a: DMatrix<f64>,
        y: DVector<f64>,
        ridge: f64,
    },
}

impl LocalLoss {
    fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            LocalLoss::Quadratic { h, r, s } => 0.5 * x.dot(&(h * x)) - r.dot(x) + 0.5 * s,
            LocalLoss::Logistic { a, y, ridge } => {
                let margins = a * x;
                let m = y.len() as f64;
                margins
                    .iter()
                    .zip(y.iter())
                    .map(|(z, yl)| softplus(-yl * z))
                    .sum::<f64>()
                    / m
                    + 0.5 * ridge * x.norm_squared()
            }
        }
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            LocalLoss::Quadratic { h, r, .. } => h * x - r,
            LocalLoss::Logistic { a, y, ridge } => {
                let margins = a * x;
                let m = y.len() as f64;
                let w = DVector::from_iterator(
                    y.len(),
                    margins
                        .iter()
                        .zip(y.iter())
                        .map(|(z, yl)| -yl * sigmoid(-yl * z) / m),
                );
                a.transpose() * w + x * *ridge
            }
        }
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            LocalLoss::Quadratic { h, .. } => h.clone(),
            LocalLoss::Logistic { a, y, ridge } => {
                let margins = a * x;
                let m = y.len() as f64;
                let d = x.len();
                let mut hess = DMatrix::identity(d, d) * *ridge;
                for (l, z) in margins.iter().enumerate() {
                    let p = sigmoid(y[l] * z);
                    let row = a.row(l);
                    hess += row.transpose() * row * (p * (1.0 - p) / m);
                }
                hess
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A problem instance: per-worker losses plus the noise half-width.
#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub dim: usize,
    pub noise_b: f64,
    losses: Vec<LocalLoss>,
}

impl Objective {
    pub fn new(
        kind: ObjectiveKind,
        dim: usize,
        noise_b: f64,
        losses: Vec<LocalLoss>,
    ) -> Result<Self, ObjectiveError> {
        if dim == 0 || losses.is_empty() {
            return Err(ObjectiveError::InvalidParameter(
                "need dim >= 1 and at least one worker".into(),
            ));
        }
        if !(noise_b.is_finite() && noise_b >= 0.0) {
            return Err(ObjectiveError::InvalidParameter(format!(
                "noise half-width must be nonnegative, got {noise_b}"
            )));
        }
        Ok(Objective {
            kind,
            dim,
            noise_b,
            losses,
        })
    }

    pub fn n(&self) -> usize {
        self.losses.len()
    }

    pub fn local(&self, i: usize) -> &LocalLoss {
        &self.losses[i]
    }

    fn vec(&self, x: &[f64]) -> Result<DVector<f64>, ObjectiveError> {
        if x.len() != self.dim {
            return Err(ObjectiveError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(DVector::from_column_slice(x))
    }

    pub fn local_value(&self, i: usize, x: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(self.losses[i].value(&self.vec(x)?))
    }

    pub fn local_gradient(&self, i: usize, x: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        Ok(self.losses[i].gradient(&self.vec(x)?).as_slice().to_vec())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        let v = self.vec(x)?;
        Ok(self.losses.iter().map(|l| l.value(&v)).sum::<f64>() / self.n() as f64)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        let v = self.vec(x)?;
        let mut g = DVector::zeros(self.dim);
        for l in &self.losses {
            g += l.gradient(&v);
        }
        g /= self.n() as f64;
        Ok(g.as_slice().to_vec())
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, ObjectiveError> {
        let v = self.vec(x)?;
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for l in &self.losses {
            h += l.hessian(&v);
        }
        Ok(h / self.n() as f64)
    }

    /// `(1/n) sum_i |grad f_i(x) - grad f(x)|^2`.
    pub fn outer_variance(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        let v = self.vec(x)?;
        let grads: Vec<DVector<f64>> = self.losses.iter().map(|l| l.gradient(&v)).collect();
        let mean = grads.iter().fold(DVector::zeros(self.dim), |acc, g| acc + g) / self.n() as f64;
        Ok(grads.iter().map(|g| (g - &mean).norm_squared()).sum::<f64>() / self.n() as f64)
    }

    /// Per-sample noise variance `d b^2 / 3`.
    pub fn sigma_sq(&self) -> f64 {
        self.dim as f64 * self.noise_b * self.noise_b / 3.0
    }

    /// Largest local curvature, `max_i lambda_max(H_i)`; for logistic losses
    /// the bound `|A_i|_2^2 / (4m) + ridge`.
    pub fn smoothness(&self) -> f64 {
        self.losses
            .iter()
            .map(|l| match l {
                LocalLoss::Quadratic { h, .. } => h
                    .clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .copied()
                    .fold(0.0, f64::max),
                LocalLoss::Logistic { a, y, ridge } => {
                    let gram = a.transpose() * a;
                    let top = gram.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max);
                    top / (4.0 * y.len() as f64) + ridge
                }
            })
            .fold(0.0, f64::max)
    }

    /// Global minimizer. Quadratics solve `(sum H_i) x = sum r_i`; logistic
    /// losses run damped Newton from zero.
    pub fn optimum(&self) -> Result<Vec<f64>, ObjectiveError> {
        let d = self.dim;
        let mut x = DVector::zeros(d);
        let iters = if self.kind == ObjectiveKind::Logistic { 100 } else { 1 };
        for _ in 0..iters {
            let g = DVector::from_vec(self.gradient(x.as_slice())?);
            if g.amax() < 1e-15 {
                break;
            }
            let h = self.hessian(x.as_slice())?;
            let step = h
                .clone()
                .cholesky()
                .map(|c| c.solve(&g))
                .or_else(|| h.lu().solve(&g))
                .ok_or_else(|| ObjectiveError::Solve("singular Hessian".into()))?;
            x -= step;
        }
        Ok(x.as_slice().to_vec())
    }
}

/// `f(x) = |x - (delta_q/2) 1|^2 / 2` on every worker: identity Hessian and an
/// optimum exactly halfway between points of the grid `{delta_q k}`.
pub fn theorem1_objective(n: usize, dim: usize, delta_q: f64) -> Result<Objective, ObjectiveError> {
    if !(delta_q > 0.0) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "grid spacing must be positive, got {delta_q}"
        )));
    }
    let c = DVector::from_element(dim, delta_q / 2.0);
    let loss = LocalLoss::Quadratic {
        h: DMatrix::identity(dim, dim),
        s: c.norm_squared(),
        r: c,
    };
    Objective::new(ObjectiveKind::Theorem1Quadratic, dim, 0.0, vec![loss; n])
}

/// `f_i(x) = kappa_i |x - c_i|^2 / 2` from explicit centers and curvatures.
pub fn hetero_quadratic_from_centers(
    centers: &[Vec<f64>],
    curvatures: &[f64],
    noise_b: f64,
) -> Result<Objective, ObjectiveError> {
    if centers.is_empty() || centers.len() != curvatures.len() {
        return Err(ObjectiveError::InvalidParameter(
            "need one curvature per center".into(),
        ));
    }
    let dim = centers[0].len();
    let losses = centers
        .iter()
        .zip(curvatures)
        .map(|(c, &kappa)| {
            if c.len() != dim {
                return Err(ObjectiveError::Dimension {
                    expected: dim,
                    got: c.len(),
                });
            }
            if !(kappa > 0.0) {
                return Err(ObjectiveError::InvalidParameter(format!(
                    "curvature must be positive, got {kappa}"
                )));
            }
            let c = DVector::from_column_slice(c);
            Ok(LocalLoss::Quadratic {
                h: DMatrix::identity(dim, dim) * kappa,
                s: kappa * c.norm_squared(),
                r: c * kappa,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Objective::new(ObjectiveKind::HeteroQuadratic, dim, noise_b, losses)
}

/// Centers `c_i = spread * u_i` with `u_i` uniform on the unit sphere.
/// Curvatures are drawn log-uniformly from `[1/curvature_spread,
/// curvature_spread]`; `curvature_spread = 1` gives identity Hessians, for
/// which the outer variance does not depend on `x`.
pub fn hetero_quadratic(
    n: usize,
    dim: usize,
    spread: f64,
    curvature_spread: f64,
    noise_b: f64,
    seed: u64,
) -> Result<Objective, ObjectiveError> {
    if !(spread >= 0.0) || !(curvature_spread >= 1.0) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "need spread >= 0 and curvature spread >= 1, got {spread}, {curvature_spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|a| spread * a / norm).collect()
        })
        .collect();
    let log_k = curvature_spread.ln();
    let curvatures: Vec<f64> = (0..n)
        .map(|_| {
            if log_k == 0.0 {
                1.0
            } else {
                rng.random_range(-log_k..=log_k).exp()
            }
        })
        .collect();
    hetero_quadratic_from_centers(&centers, &curvatures, noise_b)
}

/// Per-worker linear regression shards `y = A x_true + e`, with standard
/// normal features and label noise, full-batch local losses
/// `|A_i x - y_i|^2 / (2 m)`.
pub fn least_squares(
    n: usize,
    dim: usize,
    samples: usize,
    noise_b: f64,
    seed: u64,
) -> Result<Objective, ObjectiveError> {
    if samples < dim {
        return Err(ObjectiveError::InvalidParameter(format!(
            "need samples >= dim, got {samples} < {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_true = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let losses = (0..n)
        .map(|_| {
            let a = DMatrix::from_fn(samples, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = DVector::from_fn(samples, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
            let y = &a * &x_true + e;
            let m = samples as f64;
            LocalLoss::Quadratic {
                h: a.transpose() * &a / m,
                r: a.transpose() * &y / m,
                s: y.norm_squared() / m,
            }
        })
        .collect();
    Objective::new(ObjectiveKind::LeastSquares, dim, noise_b, losses)
}

/// Per-worker logistic regression shards with labels from a planted separator
/// flipped with probability 0.1.
pub fn logistic(
    n: usize,
    dim: usize,
    samples: usize,
    ridge: f64,
    noise_b: f64,
    seed: u64,
) -> Result<Objective, ObjectiveError> {
    if samples == 0 || !(ridge > 0.0) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "need samples >= 1 and ridge > 0, got {samples}, {ridge}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let losses = (0..n)
        .map(|_| {
            let a = DMatrix::from_fn(samples, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let margins = &a * &w;
            let y = DVector::from_iterator(
                samples,
                margins.iter().map(|z| {
                    let label = if *z >= 0.0 { 1.0 } else { -1.0 };
                    if rng.random::<f64>() < 0.1 {
                        -label
                    } else {
                        label
                    }
                }),
            );
            LocalLoss::Logistic { a, y, ridge }
        })
        .collect();
    Objective::new(ObjectiveKind::Logistic, dim, noise_b, losses)
}

/// Stochastic gradient oracle over an [`Objective`].
#[derive(Debug)]
pub struct GradOracle {
    pub objective: Objective,
    pub seed: u64,
    samples: AtomicU64,
}

impl Clone for GradOracle {
    fn clone(&self) -> Self {
        GradOracle {
            objective: self.objective.clone(),
            seed: self.seed,
            samples: AtomicU64::new(self.samples()),
        }
    }
}

impl GradOracle {
    pub fn new(objective: Objective, seed: u64) -> Self {
        GradOracle {
            objective,
            seed,
            samples: AtomicU64::new(0),
        }
    }

    pub fn n(&self) -> usize {
        self.objective.n()
    }

    pub fn dim(&self) -> usize {
        self.objective.dim
    }

    /// Gradients sampled so far.
    pub fn samples(&self) -> u64 {
        self.samples.load(Ordering::Relaxed)
    }

    /// `grad f_i(x) + b (2u - 1)`, reproducible from `(seed, k, worker)`.
    pub fn sample_gradient(&self, worker: usize, x: &[f64], k: u64) -> Result<Vec<f64>, ObjectiveError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::Diverged { worker, k });
        }
        let mut g = self.objective.local_gradient(worker, x)?;
        let b = self.objective.noise_b;
        if b > 0.0 {
            for (j, gj) in g.iter_mut().enumerate() {
                let u = counter_uniform(self.seed, DOMAIN_GRADIENT, k, worker as u64, j as u64);
                *gj += b * (2.0 * u - 1.0);
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::Diverged { worker, k });
        }
        self.samples.fetch_add(1, Ordering::Relaxed);
        Ok(g)
    }
}
