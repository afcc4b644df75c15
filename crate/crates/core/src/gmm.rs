//! One-dimensional Gaussian mixtures fitted by expectation-maximisation, and
//! the t-test that affiliates a day-curve with one of the mixture states.
//!
//! Temporal dependence between points is ignored during fitting: the mixture
//! only has to locate the mean levels of the machine's working states.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::stats::{mean, variance};

pub const DEFAULT_COMPONENTS: usize = 5;
pub const DEFAULT_POINTS: usize = 10_000;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 500;
const MAX_RESTARTS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("a mixture component collapsed in {restarts} consecutive restarts")]
    Collapse { restarts: usize },
}

pub type Result<T> = std::result::Result<T, GmmError>;

/// How EM is started.
#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    /// k-means++ seeding followed by hard-assignment moments.
    KMeansPlusPlus { seed: u64 },
    /// Explicit starting parameters.
    Given {
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Log-likelihood of the starting parameters followed by one entry per
    /// EM iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

impl GmmFit {
    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    /// Total log-likelihood of `points` under the mixture.
    pub fn log_likelihood(&self, points: &[f64]) -> f64 {
        let mut log_terms = vec![0.0; self.n_components()];
        points
            .iter()
            .map(|&y| {
                for (k, t) in log_terms.iter_mut().enumerate() {
                    *t = self.log_joint(y, k);
                }
                log_sum_exp(&log_terms)
            })
            .sum()
    }

    fn log_joint(&self, y: f64, k: usize) -> f64 {
        self.weights[k].ln() + log_normal_pdf(y, self.means[k], self.variances[k])
    }

    /// Component indices ordered by increasing mean.
    pub fn order_by_mean(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_components()).collect();
        idx.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]));
        idx
    }

    /// The same mixture with components sorted by increasing mean.
    pub fn sorted_by_mean(&self) -> GmmFit {
        let idx = self.order_by_mean();
        GmmFit {
            weights: idx.iter().map(|&k| self.weights[k]).collect(),
            means: idx.iter().map(|&k| self.means[k]).collect(),
            variances: idx.iter().map(|&k| self.variances[k]).collect(),
            loglik_trace: self.loglik_trace.clone(),
            converged: self.converged,
        }
    }
}

fn log_normal_pdf(y: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mu) * (y - mu) / var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior state probabilities, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(pub DMatrix<f64>);

impl Responsibilities {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// E-step: `r[d][k] = α_k φ(y_d | μ_k, σ_k²) / Σ_j α_j φ(y_d | μ_j, σ_j²)`,
/// evaluated in log space so that underflowing densities never yield NaN.
pub fn responsibilities(points: &[f64], fit: &GmmFit) -> Responsibilities {
    let k = fit.n_components();
    let mut out = DMatrix::zeros(points.len(), k);
    let mut logs = vec![0.0; k];
    for (d, &y) in points.iter().enumerate() {
        for (j, l) in logs.iter_mut().enumerate() {
            *l = fit.log_joint(y, j);
        }
        let lse = log_sum_exp(&logs);
        for j in 0..k {
            out[(d, j)] = (logs[j] - lse).exp();
        }
    }
    Responsibilities(out)
}

fn d2_sample(points: &[f64], dist2: &[f64], total: f64, rng: &mut ChaCha8Rng) -> f64 {
    if total <= 0.0 {
        return points[rng.random_range(0..points.len())];
    }
    let mut u = rng.random::<f64>() * total;
    for (p, d) in points.iter().zip(dist2) {
        if u < *d {
            return *p;
        }
        u -= d;
    }
    points[points.len() - 1]
}

/// Greedy k-means++: each step draws `2 + ⌊ln k⌋` candidates and keeps the
/// one with the lowest potential.
fn kmeans_pp_centers(points: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut dist2: Vec<f64> = points.iter().map(|p| (p - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let mut best: Option<(f64, f64)> = None;
        for _ in 0..trials {
            let c = d2_sample(points, &dist2, total, rng);
            let potential: f64 = dist2.iter().zip(points).map(|(d, p)| d.min((p - c).powi(2))).sum();
            if best.is_none_or(|(_, b)| potential < b) {
                best = Some((c, potential));
            }
        }
        let next = best.expect("at least one trial").0;
        centers.push(next);
        for (d, p) in dist2.iter_mut().zip(points) {
            *d = d.min((p - next).powi(2));
        }
    }
    centers
}

fn seeded_start(points: &[f64], k: usize, seed: u64, jitter: f64) -> GmmFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_centers(points, k, &mut rng);
    let total_var = variance(points).max(VARIANCE_FLOOR);
    if jitter > 0.0 {
        for c in centers.iter_mut() {
            *c += jitter * total_var.sqrt() * (rng.random::<f64>() - 0.5);
        }
    }
    let mut count = vec![0usize; k];
    let mut sum = vec![0.0; k];
    let mut sum2 = vec![0.0; k];
    for &p in points {
        let j = (0..k)
            .min_by(|&a, &b| (p - centers[a]).abs().total_cmp(&(p - centers[b]).abs()))
            .expect("k >= 1");
        count[j] += 1;
        sum[j] += p;
        sum2[j] += p * p;
    }
    let n = points.len() as f64;
    let min_var = (1e-3 * total_var).max(10.0 * VARIANCE_FLOOR);
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for j in 0..k {
        if count[j] == 0 {
            weights.push(0.5 / n);
            means.push(centers[j]);
            variances.push(total_var);
        } else {
            let c = count[j] as f64;
            let m = sum[j] / c;
            weights.push(c / n);
            means.push(m);
            variances.push((sum2[j] / c - m * m).max(min_var));
        }
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    GmmFit {
        weights,
        means,
        variances,
        loglik_trace: Vec::new(),
        converged: false,
    }
}

enum EmOutcome {
    Done(GmmFit),
    Collapsed,
}

fn run_em(points: &[f64], mut fit: GmmFit, tol: f64, max_iter: usize) -> EmOutcome {
    let k = fit.n_components();
    let mut ll = fit.log_likelihood(points);
    fit.loglik_trace = vec![ll];
    let mut logs = vec![0.0; k];
    for _ in 0..max_iter {
        // E-step accumulated straight into the sufficient statistics
        let mut nk = vec![0.0; k];
        let mut sy = vec![0.0; k];
        for &y in points {
            for (j, l) in logs.iter_mut().enumerate() {
                *l = fit.log_joint(y, j);
            }
            let lse = log_sum_exp(&logs);
            for j in 0..k {
                let r = (logs[j] - lse).exp();
                nk[j] += r;
                sy[j] += r * y;
            }
        }
        let means: Vec<f64> = (0..k).map(|j| sy[j] / nk[j]).collect();
        let mut sdev = vec![0.0; k];
        for &y in points {
            for (j, l) in logs.iter_mut().enumerate() {
                *l = fit.log_joint(y, j);
            }
            let lse = log_sum_exp(&logs);
            for j in 0..k {
                let r = (logs[j] - lse).exp();
                sdev[j] += r * (y - means[j]) * (y - means[j]);
            }
        }
        // M-step
        let n = points.len() as f64;
        let mut next = GmmFit {
            weights: nk.iter().map(|v| v / n).collect(),
            means,
            variances: (0..k).map(|j| sdev[j] / nk[j]).collect(),
            loglik_trace: std::mem::take(&mut fit.loglik_trace),
            converged: false,
        };
        if next
            .variances
            .iter()
            .zip(&next.weights)
            .any(|(v, w)| !(*v >= VARIANCE_FLOOR) || !(*w > 0.0))
        {
            return EmOutcome::Collapsed;
        }
        let new_ll = next.log_likelihood(points);
        next.loglik_trace.push(new_ll);
        let gain = new_ll - ll;
        fit = next;
        ll = new_ll;
        if gain < tol * ll.abs().max(1.0) {
            fit.converged = true;
            break;
        }
    }
    EmOutcome::Done(fit)
}

/// Fits a `k`-component mixture by EM.
///
/// Iterates until the log-likelihood gain falls below `tol` relative to the
/// current log-likelihood, or `max_iter` iterations. A component whose
/// variance drops below [`VARIANCE_FLOOR`] triggers a jittered restart.
pub fn em_fit(
    points: &[f64],
    k: usize,
    init: &InitPolicy,
    tol: f64,
    max_iter: usize,
) -> Result<GmmFit> {
    if k < 1 {
        return Err(GmmError::Param("at least one component is required".into()));
    }
    if points.len() <= k {
        return Err(GmmError::Param(format!(
            "{} points cannot identify {k} components",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(GmmError::Param("points must be finite".into()));
    }
    for restart in 0..=MAX_RESTARTS {
        let start = match init {
            InitPolicy::KMeansPlusPlus { seed } => seeded_start(
                points,
                k,
                seed.wrapping_add(restart as u64),
                if restart == 0 { 0.0 } else { 0.1 },
            ),
            InitPolicy::Given {
                weights,
                means,
                variances,
            } => {
                if weights.len() != k || means.len() != k || variances.len() != k {
                    return Err(GmmError::Param(format!(
                        "initial parameters must have {k} entries each"
                    )));
                }
                if variances.iter().any(|v| !(*v > 0.0)) || weights.iter().any(|w| !(*w > 0.0)) {
                    return Err(GmmError::Param(
                        "initial weights and variances must be positive".into(),
                    ));
                }
                let s: f64 = weights.iter().sum();
                let mut fit = GmmFit {
                    weights: weights.iter().map(|w| w / s).collect(),
                    means: means.clone(),
                    variances: variances.clone(),
                    loglik_trace: Vec::new(),
                    converged: false,
                };
                if restart > 0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(restart as u64);
                    let sd = variance(points).sqrt();
                    fit.means
                        .iter_mut()
                        .for_each(|m| *m += 0.1 * sd * (rng.random::<f64>() - 0.5));
                    fit.variances.iter_mut().for_each(|v| *v = v.max(1e-3 * sd * sd));
                }
                fit
            }
        };
        if let EmOutcome::Done(fit) = run_em(points, start, tol, max_iter) {
            return Ok(fit);
        }
    }
    Err(GmmError::Collapse {
        restarts: MAX_RESTARTS,
    })
}

/// Result of assigning a day-curve to a mixture state.
#[derive(Debug, Clone, PartialEq)]
pub struct Affiliation {
    pub state: usize,
    /// One-sample t statistic of `curve − μ_k` for every state.
    pub t_stats: Vec<f64>,
    /// Two-sided p-values, `n − 1` degrees of freedom.
    pub p_values: Vec<f64>,
    /// The equal-mean null was rejected at `level` for every state.
    pub ambiguous: bool,
}

/// Affiliates a curve with the state whose mean is closest in t-statistic.
///
/// A curve with zero within-curve variance is compared by absolute mean
/// distance: `t` is zero for an exact match and infinite otherwise.
pub fn affiliate(curve: &[f64], fit: &GmmFit, level: f64) -> Result<Affiliation> {
    let n = curve.len();
    if n < 2 {
        return Err(GmmError::Param("a curve needs at least two points".into()));
    }
    if fit.n_components() == 0 {
        return Err(GmmError::Param("empty mixture".into()));
    }
    let m = mean(curve);
    let sd = (curve.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2");
    let mut t_stats = Vec::with_capacity(fit.n_components());
    let mut p_values = Vec::with_capacity(fit.n_components());
    for &mu in &fit.means {
        let diff = m - mu;
        let t = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        let p = if t.is_infinite() {
            0.0
        } else {
            2.0 * (1.0 - dist.cdf(t.abs()))
        };
        t_stats.push(t);
        p_values.push(p);
    }
    let state = (0..fit.n_components())
        .min_by(|&a, &b| {
            t_stats[a]
                .abs()
                .total_cmp(&t_stats[b].abs())
                .then_with(|| {
                    (m - fit.means[a])
                        .abs()
                        .total_cmp(&(m - fit.means[b]).abs())
                })
        })
        .expect("non-empty mixture");
    let ambiguous = p_values.iter().all(|&p| p < level);
    Ok(Affiliation {
        state,
        t_stats,
        p_values,
        ambiguous,
    })
}
