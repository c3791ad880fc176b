//! Communication topologies.
//!
//! A [`CommMatrix`] is a symmetric doubly stochastic mixing matrix together
//! with its spectrum. The quantity that governs consensus speed is
//!
//! ```text
//! rho = max{ |lambda_2(W)|, |lambda_n(W)| }   (eigenvalues sorted descending)
//! ```
//!
//! and every constructed matrix satisfies `rho < 1`. Ring and complete
//! matrices get their eigenvalues from closed forms (circulant spectra);
//! custom matrices go through a dense symmetric eigensolver.
//!
//! Asynchronous gossip uses a time-varying sequence of pair-averaging
//! matrices, each of which individually has `rho = 1`. Mixing is then
//! expressed through a window length `tmix` such that every window product
//! maps any probability vector to within 1/2 (in l1) of the uniform vector;
//! [`empirical_mixing_check`] measures this and [`calibrate_tmix`] finds the
//! smallest passing window.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{counter_below, DOMAIN_GOSSIP};

/// Tolerance for row/column sums and symmetry.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopoError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid gossip pair ({0}, {1})")]
    InvalidPair(usize, usize),
    #[error("matrix validation failed: {0}")]
    Validation(String),
    #[error("matrix does not mix: rho = {0}, need rho < 1")]
    NoMixing(f64),
    #[error("matrix file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Base of the logarithm in `log(4n)` / `log(16n)` style bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LogBase::Natural => "e",
            LogBase::Two => "2",
        }
    }
}

/// Spectral summary of a symmetric doubly stochastic matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub rho: f64,
    pub lambda2: f64,
    pub lambda_n: f64,
    /// Smallest strictly positive entry.
    pub phi: f64,
}

impl Spectrum {
    fn from_sorted(eigenvalues: &[f64], phi: f64) -> Self {
        // a single worker has no second eigenvalue; consensus is trivial
        let (lambda2, lambda_n) = if eigenvalues.len() < 2 {
            (0.0, 0.0)
        } else {
            (eigenvalues[1], eigenvalues[eigenvalues.len() - 1])
        };
        Spectrum {
            rho: lambda2.abs().max(lambda_n.abs()),
            lambda2,
            lambda_n,
            phi,
        }
    }
}

/// Symmetric doubly stochastic mixing matrix with cached spectral quantities.
#[derive(Debug, Clone)]
pub struct CommMatrix {
    w: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    spectrum: Spectrum,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl CommMatrix {
    /// Validates `w`, computes its spectrum numerically and rejects `rho >= 1`.
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self, TopoError> {
        validate_weights(&w)?;
        let eigenvalues = symmetric_eigenvalues(&w);
        Self::with_eigenvalues(w, eigenvalues)
    }

    /// Row-major weights of an `n x n` matrix.
    pub fn from_weights(n: usize, weights: &[f64]) -> Result<Self, TopoError> {
        if n == 0 || weights.len() != n * n {
            return Err(TopoError::InvalidTopology(format!(
                "expected {n}x{n} weights, got {} entries",
                weights.len()
            )));
        }
        Self::from_matrix(DMatrix::from_row_slice(n, n, weights))
    }

    fn with_eigenvalues(w: DMatrix<f64>, mut eigenvalues: Vec<f64>) -> Result<Self, TopoError> {
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let spectrum = Spectrum::from_sorted(&eigenvalues, smallest_positive(&w));
        if spectrum.rho >= 1.0 - STOCHASTIC_TOL {
            return Err(TopoError::NoMixing(spectrum.rho));
        }
        let n = w.nrows();
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && w[(j, i)] > 0.0)
                    .map(|j| (j, w[(j, i)]))
                    .collect()
            })
            .collect();
        Ok(CommMatrix {
            w,
            eigenvalues,
            spectrum,
            neighbors,
        })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Eigenvalues sorted descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    pub fn rho(&self) -> f64 {
        self.spectrum.rho
    }

    pub fn lambda2(&self) -> f64 {
        self.spectrum.lambda2
    }

    pub fn lambda_n(&self) -> f64 {
        self.spectrum.lambda_n
    }

    pub fn phi(&self) -> f64 {
        self.spectrum.phi
    }

    /// Workers `j != i` with `W_ji > 0`, paired with `W_ji`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    /// Total number of directed (receiver, sender) links.
    pub fn link_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

fn symmetric_eigenvalues(w: &DMatrix<f64>) -> Vec<f64> {
    SymmetricEigen::new(w.clone()).eigenvalues.iter().copied().collect()
}

fn smallest_positive(w: &DMatrix<f64>) -> f64 {
    w.iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min)
}

/// Checks squareness, nonnegativity, symmetry and unit row/column sums.
pub fn validate_weights(w: &DMatrix<f64>) -> Result<(), TopoError> {
    let n = w.nrows();
    if n == 0 || w.ncols() != n {
        return Err(TopoError::Validation(format!(
            "matrix must be square and nonempty, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    if let Some(v) = w.iter().find(|v| !v.is_finite()) {
        return Err(TopoError::Validation(format!("non-finite entry {v}")));
    }
    let mut problems = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if w[(i, j)] < -STOCHASTIC_TOL {
                problems.push(format!("entry ({i},{j}) = {} is negative", w[(i, j)]));
            }
            if j > i && (w[(i, j)] - w[(j, i)]).abs() > STOCHASTIC_TOL {
                problems.push(format!(
                    "asymmetric at ({i},{j}): {} vs {}",
                    w[(i, j)],
                    w[(j, i)]
                ));
            }
        }
        let row: f64 = w.row(i).sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL {
            problems.push(format!("row {i} sums to {row}"));
        }
        let col: f64 = w.column(i).sum();
        if (col - 1.0).abs() > STOCHASTIC_TOL {
            problems.push(format!("column {i} sums to {col}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TopoError::Validation(problems.join("; ")))
    }
}

/// `(rho, lambda2, lambda_n, phi)` of a symmetric doubly stochastic matrix,
/// from a dense eigendecomposition. Does not reject `rho >= 1`.
pub fn spectral_quantities(w: &DMatrix<f64>) -> Result<Spectrum, TopoError> {
    validate_weights(w)?;
    let mut ev = symmetric_eigenvalues(w);
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(Spectrum::from_sorted(&ev, smallest_positive(w)))
}

/// Ring of `n >= 3` workers. `lazy = false` gives `(I + P + P^T)/3`,
/// `lazy = true` gives `I/2 + (P + P^T)/4`.
pub fn ring_matrix(n: usize, lazy: bool) -> Result<CommMatrix, TopoError> {
    if n < 3 {
        return Err(TopoError::InvalidTopology(format!(
            "ring needs at least 3 workers, got {n}"
        )));
    }
    let (self_w, side_w) = if lazy { (0.5, 0.25) } else { (1.0 / 3.0, 1.0 / 3.0) };
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        w[(i, i)] += self_w;
        w[(i, (i + 1) % n)] += side_w;
        w[(i, (i + n - 1) % n)] += side_w;
    }
    validate_weights(&w)?;
    CommMatrix::with_eigenvalues(w, ring_eigenvalues(n, lazy))
}

/// Circulant spectrum of the ring: `(1 + 2cos(2 pi k/n))/3` or
/// `1/2 + cos(2 pi k/n)/2`, unsorted.
pub fn ring_eigenvalues(n: usize, lazy: bool) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let c = (2.0 * PI * k as f64 / n as f64).cos();
            if lazy {
                0.5 + 0.5 * c
            } else {
                (1.0 + 2.0 * c) / 3.0
            }
        })
        .collect()
}

/// Exact averaging over `n >= 2` workers.
pub fn complete_matrix(n: usize) -> Result<CommMatrix, TopoError> {
    if n < 2 {
        return Err(TopoError::InvalidTopology(format!(
            "complete graph needs at least 2 workers, got {n}"
        )));
    }
    let w = DMatrix::from_element(n, n, 1.0 / n as f64);
    let mut ev = vec![0.0; n];
    ev[0] = 1.0;
    CommMatrix::with_eigenvalues(w, ev)
}

/// `gamma W + (1 - gamma) I` for `gamma` in `(0, 1]`. Eigenvectors are shared,
/// so each eigenvalue maps to `gamma lambda + 1 - gamma`.
pub fn slack_matrix(m: &CommMatrix, gamma: f64) -> Result<CommMatrix, TopoError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TopoError::InvalidParameter(format!(
            "slack ratio gamma must be in (0, 1], got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(m.clone());
    }
    let n = m.n();
    let w = m.matrix() * gamma + DMatrix::identity(n, n) * (1.0 - gamma);
    let ev = m
        .eigenvalues()
        .iter()
        .map(|l| gamma * l + (1.0 - gamma))
        .collect();
    CommMatrix::with_eigenvalues(w, ev)
}

/// Identity except that workers `i` and `j` average with weight 1/2 each.
pub fn pair_gossip_matrix(n: usize, i: usize, j: usize) -> Result<DMatrix<f64>, TopoError> {
    if i == j || i >= n || j >= n {
        return Err(TopoError::InvalidPair(i, j));
    }
    let mut w = DMatrix::identity(n, n);
    w[(i, i)] = 0.5;
    w[(j, j)] = 0.5;
    w[(i, j)] = 0.5;
    w[(j, i)] = 0.5;
    Ok(w)
}

/// Whitespace-separated text file with `n` rows of `n` weights.
/// Blank lines and `#` comments are ignored.
pub fn load_matrix_file(path: &Path) -> Result<CommMatrix, TopoError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TopoError::InvalidTopology(format!("{}: {e}", path.display())))?;
    parse_matrix_text(&text)
}

pub fn parse_matrix_text(text: &str) -> Result<CommMatrix, TopoError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| TopoError::Parse {
                    line: idx + 1,
                    msg: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(TopoError::Parse {
                    line: idx + 1,
                    msg: format!("expected {} entries, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows[0].len() != n {
        return Err(TopoError::InvalidTopology(format!(
            "matrix must be square, got {} rows of {} entries",
            n,
            rows.first().map_or(0, Vec::len)
        )));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    CommMatrix::from_weights(n, &flat)
}

/// Mixing-time bound `log(4n) / (1 - rho)` for a fixed matrix.
pub fn mixing_time_bound(rho: f64, n: usize, base: LogBase) -> Result<f64, TopoError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(TopoError::InvalidParameter(format!(
            "mixing bound needs 0 <= rho < 1, got {rho}"
        )));
    }
    if n == 0 {
        return Err(TopoError::InvalidParameter("n must be positive".into()));
    }
    Ok(base.log(4.0 * n as f64) / (1.0 - rho))
}

/// Rule producing the communication matrix of each asynchronous event.
#[derive(Debug, Clone)]
pub enum PairSampler {
    /// Uniform initiator, then one of its two ring neighbors uniformly.
    RingPair,
    /// Uniform initiator, then any other worker uniformly.
    CompletePair,
    /// Always the same pair.
    FixedPair(usize, usize),
    /// The same (dense) matrix every event.
    Fixed(CommMatrix),
}

/// Communication of one event: either a pair that averages, or a dense matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GossipEvent {
    Pair { initiator: usize, peer: usize },
    Dense,
}

/// Deterministic event-indexed sequence of gossip matrices.
#[derive(Debug, Clone)]
pub struct GossipSchedule {
    n: usize,
    sampler: PairSampler,
    seed: u64,
    tmix: usize,
}

impl GossipSchedule {
    pub fn new(n: usize, sampler: PairSampler, seed: u64, tmix: usize) -> Result<Self, TopoError> {
        match &sampler {
            PairSampler::RingPair if n < 3 => {
                return Err(TopoError::InvalidTopology(format!(
                    "ring gossip needs at least 3 workers, got {n}"
                )))
            }
            PairSampler::CompletePair if n < 2 => {
                return Err(TopoError::InvalidTopology(format!(
                    "pair gossip needs at least 2 workers, got {n}"
                )))
            }
            PairSampler::FixedPair(i, j) if i == j || *i >= n || *j >= n => {
                return Err(TopoError::InvalidPair(*i, *j))
            }
            PairSampler::Fixed(m) if m.n() != n => {
                return Err(TopoError::InvalidTopology(format!(
                    "fixed matrix has {} workers, schedule has {n}",
                    m.n()
                )))
            }
            _ => {}
        }
        if tmix == 0 {
            return Err(TopoError::InvalidParameter("tmix must be >= 1".into()));
        }
        Ok(GossipSchedule {
            n,
            sampler,
            seed,
            tmix,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tmix(&self) -> usize {
        self.tmix
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sampler(&self) -> &PairSampler {
        &self.sampler
    }

    pub fn with_tmix(&self, tmix: usize) -> Result<Self, TopoError> {
        Self::new(self.n, self.sampler.clone(), self.seed, tmix)
    }

    /// The communication of event `k`.
    pub fn event(&self, k: u64) -> GossipEvent {
        let n = self.n as u64;
        match &self.sampler {
            PairSampler::RingPair => {
                let i = counter_below(self.seed, DOMAIN_GOSSIP, k, 0, 0, n);
                let side = counter_below(self.seed, DOMAIN_GOSSIP, k, 1, 0, 2);
                let j = if side == 0 { (i + 1) % n } else { (i + n - 1) % n };
                GossipEvent::Pair {
                    initiator: i as usize,
                    peer: j as usize,
                }
            }
            PairSampler::CompletePair => {
                let i = counter_below(self.seed, DOMAIN_GOSSIP, k, 0, 0, n);
                let off = 1 + counter_below(self.seed, DOMAIN_GOSSIP, k, 1, 0, n - 1);
                GossipEvent::Pair {
                    initiator: i as usize,
                    peer: ((i + off) % n) as usize,
                }
            }
            PairSampler::FixedPair(i, j) => GossipEvent::Pair {
                initiator: *i,
                peer: *j,
            },
            PairSampler::Fixed(_) => GossipEvent::Dense,
        }
    }

    /// Dense matrix of event `k`.
    pub fn matrix(&self, k: u64) -> DMatrix<f64> {
        match (self.event(k), &self.sampler) {
            (GossipEvent::Pair { initiator, peer }, _) => {
                pair_gossip_matrix(self.n, initiator, peer).expect("validated pair")
            }
            (GossipEvent::Dense, PairSampler::Fixed(m)) => m.matrix().clone(),
            (GossipEvent::Dense, _) => unreachable!("dense events come from fixed samplers"),
        }
    }

    /// `P <- W_k P`, in place.
    fn apply_left(&self, k: u64, p: &mut DMatrix<f64>) {
        match self.event(k) {
            GossipEvent::Pair { initiator, peer } => {
                for c in 0..self.n {
                    let avg = 0.5 * (p[(initiator, c)] + p[(peer, c)]);
                    p[(initiator, c)] = avg;
                    p[(peer, c)] = avg;
                }
            }
            GossipEvent::Dense => {
                if let PairSampler::Fixed(m) = &self.sampler {
                    *p = m.matrix() * &*p;
                }
            }
        }
    }
}

/// Outcome of [`empirical_mixing_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingReport {
    pub tmix: usize,
    pub windows: usize,
    pub max_distance: f64,
    pub passed: bool,
    /// `(window start, basis index)` of the largest distance seen.
    pub worst: Option<(u64, usize)>,
}

/// For every window `[a, a + tmix)` inside `[0, horizon)` and every basis
/// vector `e_i`, measures `|| W_{a+tmix-1} ... W_a e_i - 1/n ||_1` and checks
/// it against 1/2.
pub fn empirical_mixing_check(schedule: &GossipSchedule, horizon: u64) -> MixingReport {
    let n = schedule.n;
    let t = schedule.tmix as u64;
    let target = 1.0 / n as f64;
    let mut report = MixingReport {
        tmix: schedule.tmix,
        windows: 0,
        max_distance: 0.0,
        passed: false,
        worst: None,
    };
    if horizon < t {
        return report;
    }
    let mut p = DMatrix::<f64>::identity(n, n);
    for a in 0..=(horizon - t) {
        p.fill_with_identity();
        for q in a..a + t {
            schedule.apply_left(q, &mut p);
        }
        for i in 0..n {
            let d: f64 = p.column(i).iter().map(|v| (v - target).abs()).sum();
            if d > report.max_distance || report.worst.is_none() {
                report.max_distance = report.max_distance.max(d);
                if d >= report.max_distance {
                    report.worst = Some((a, i));
                }
            }
        }
        report.windows += 1;
    }
    report.passed = report.max_distance <= 0.5;
    report
}

/// Smallest window length in `1..=max_t` for which `trials` consecutive
/// windows of `schedule` all pass [`empirical_mixing_check`]. Binary search is
/// valid because doubly stochastic products never increase l1 distance to
/// the uniform vector.
pub fn calibrate_tmix(
    schedule: &GossipSchedule,
    trials: u64,
    max_t: usize,
) -> Result<usize, TopoError> {
    if trials == 0 || max_t == 0 {
        return Err(TopoError::InvalidParameter(
            "calibration needs trials >= 1 and max_t >= 1".into(),
        ));
    }
    let passes = |t: usize| -> Result<bool, TopoError> {
        let s = schedule.with_tmix(t)?;
        Ok(empirical_mixing_check(&s, trials + t as u64 - 1).passed)
    };
    if !passes(max_t)? {
        return Err(TopoError::InvalidParameter(format!(
            "no window up to {max_t} events mixes to within 1/2"
        )));
    }
    let (mut lo, mut hi) = (1usize, max_t);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ring8_uniform_spectrum() {
        let m = ring_matrix(8, false).unwrap();
        assert!(close(m.rho(), (1.0 + 2f64.sqrt()) / 3.0, 1e-12));
        assert!(close(m.rho(), 0.804738, 1e-6));
        assert!(close(m.lambda_n(), -1.0 / 3.0, 1e-12));
        assert!(close(m.phi(), 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn ring8_lazy_spectrum() {
        let m = ring_matrix(8, true).unwrap();
        assert!(close(m.lambda2(), 0.5 + 0.5 * (PI / 4.0).cos(), 1e-12));
        assert!(close(m.lambda2(), 0.853553, 1e-6));
        assert!(close(m.lambda_n(), 0.0, 1e-12));
        assert!(m.lambda_n() > -1.0 / 3.0);
        assert_eq!(m.phi(), 0.25);
    }

    #[test]
    fn ring3_is_complete() {
        let m = ring_matrix(3, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(m.weight(i, j), 1.0 / 3.0, 1e-15));
            }
        }
        assert!(m.rho() < 1e-12);
    }

    #[test]
    fn ring_rejects_small_n() {
        assert!(matches!(ring_matrix(2, false), Err(TopoError::InvalidTopology(_))));
        assert!(matches!(ring_matrix(0, true), Err(TopoError::InvalidTopology(_))));
    }

    #[test]
    fn complete_matrices() {
        let m2 = complete_matrix(2).unwrap();
        assert_eq!(m2.matrix(), &DMatrix::from_element(2, 2, 0.5));
        assert_eq!(m2.rho(), 0.0);
        assert_eq!(complete_matrix(4).unwrap().rho(), 0.0);
        assert_eq!(complete_matrix(8).unwrap().phi(), 0.125);
        assert!(matches!(complete_matrix(1), Err(TopoError::InvalidTopology(_))));
    }

    #[test]
    fn identity_is_rejected() {
        let id = DMatrix::<f64>::identity(4, 4);
        let s = spectral_quantities(&id).unwrap();
        assert_eq!(s.rho, 1.0);
        assert!(matches!(CommMatrix::from_matrix(id), Err(TopoError::NoMixing(_))));
    }

    #[test]
    fn numeric_spectrum_of_complete_is_zero() {
        let s = spectral_quantities(&DMatrix::from_element(5, 5, 0.2)).unwrap();
        assert!(s.lambda2.abs() < 1e-12 && s.lambda_n.abs() < 1e-12);
    }

    #[test]
    fn validation_names_offenders() {
        let mut w = DMatrix::from_element(3, 3, 1.0 / 3.0);
        w[(0, 1)] = 0.5;
        let err = spectral_quantities(&w).unwrap_err().to_string();
        assert!(err.contains("row 0"), "{err}");
        assert!(err.contains("column 1"), "{err}");
        assert!(err.contains("asymmetric at (0,1)"), "{err}");
    }

    #[test]
    fn slack_examples() {
        let ring = ring_matrix(8, false).unwrap();
        let same = slack_matrix(&ring, 1.0).unwrap();
        assert_eq!(same.matrix(), ring.matrix());
        let half = slack_matrix(&ring, 0.5).unwrap();
        assert!(close(half.rho(), 0.5 * ring.rho() + 0.5, 1e-12));
        assert!(close(half.rho(), 0.902369, 1e-6));
        let c = slack_matrix(&complete_matrix(4).unwrap(), 0.25).unwrap();
        assert!(close(c.rho(), 0.75, 1e-12));
        assert!(slack_matrix(&ring, 0.0).is_err());
        assert!(slack_matrix(&ring, 1.5).is_err());
    }

    #[test]
    fn pair_gossip_examples() {
        let w = pair_gossip_matrix(3, 0, 1).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(w, expect);
        assert_eq!(spectral_quantities(&w).unwrap().rho, 1.0);
        assert_eq!(pair_gossip_matrix(2, 0, 1).unwrap(), DMatrix::from_element(2, 2, 0.5));
        assert_eq!(pair_gossip_matrix(3, 1, 1), Err(TopoError::InvalidPair(1, 1)));
    }

    #[test]
    fn ring4_pair_product_mixes_e1() {
        // product over all adjacent ring pairs applied to e_1
        let mut v = DMatrix::<f64>::zeros(4, 1);
        v[(0, 0)] = 1.0;
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            v = pair_gossip_matrix(4, i, j).unwrap() * v;
        }
        let d: f64 = v.iter().map(|x| (x - 0.25).abs()).sum();
        assert!(d <= 0.5, "distance {d}");
    }

    #[test]
    fn mixing_bound_examples() {
        assert!(close(mixing_time_bound(0.0, 1, LogBase::Natural).unwrap(), 4f64.ln(), 1e-15));
        let b = mixing_time_bound(0.804738, 8, LogBase::Natural).unwrap();
        assert!(close(b, 32f64.ln() / 0.195262, 1e-9));
        assert!(close(b, 17.75, 0.01));
        assert!(close(mixing_time_bound(0.5, 4, LogBase::Natural).unwrap(), 16f64.ln() / 0.5, 1e-12));
        assert!(close(mixing_time_bound(0.5, 4, LogBase::Two).unwrap(), 8.0, 1e-12));
        assert!(mixing_time_bound(1.0, 4, LogBase::Natural).is_err());
    }

    #[test]
    fn complete_schedule_mixes_in_one_event() {
        let s = GossipSchedule::new(5, PairSampler::Fixed(complete_matrix(5).unwrap()), 0, 1).unwrap();
        let r = empirical_mixing_check(&s, 50);
        assert!(r.passed);
        assert!(r.max_distance < 1e-15);
        assert_eq!(r.windows, 50);
    }

    #[test]
    fn fixed_pair_never_mixes_third_worker() {
        let s = GossipSchedule::new(3, PairSampler::FixedPair(0, 1), 0, 8).unwrap();
        let r = empirical_mixing_check(&s, 100);
        assert!(!r.passed);
        assert_eq!(r.worst.map(|w| w.1), Some(2));
        assert!(close(r.max_distance, 4.0 / 3.0, 1e-12));
    }

    #[test]
    fn ring_pair_events_are_adjacent() {
        let s = GossipSchedule::new(6, PairSampler::RingPair, 9, 1).unwrap();
        for k in 0..1000 {
            match s.event(k) {
                GossipEvent::Pair { initiator, peer } => {
                    let d = (initiator + 6 - peer) % 6;
                    assert!(d == 1 || d == 5);
                }
                GossipEvent::Dense => panic!("ring sampler yields pairs"),
            }
        }
    }

    #[test]
    fn calibration_is_minimal() {
        let s = GossipSchedule::new(4, PairSampler::RingPair, 3, 1).unwrap();
        let t = calibrate_tmix(&s, 2000, 200).unwrap();
        assert!(empirical_mixing_check(&s.with_tmix(t).unwrap(), 2000 + t as u64 - 1).passed);
        if t > 1 {
            assert!(!empirical_mixing_check(&s.with_tmix(t - 1).unwrap(), 2000 + t as u64 - 2).passed);
        }
    }

    #[test]
    fn custom_matrix_text() {
        let m = parse_matrix_text("# lazy pair\n0.75 0.25\n0.25 0.75\n").unwrap();
        assert!(close(m.rho(), 0.5, 1e-12));
        assert!(matches!(
            parse_matrix_text("0.5 0.5\n0.5 x\n"),
            Err(TopoError::Parse { line: 2, .. })
        ));
        assert!(parse_matrix_text("1 0\n0 1\n").is_err());
    }
}
