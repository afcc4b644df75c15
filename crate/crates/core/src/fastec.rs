//! Regime-switching FASTEC: nuclear-norm penalised multivariate expectile
//! regression of day-curves on a B-spline design, combined with the Gaussian
//! mixture states from [`crate::gmm`].
//!
//! Training follows these steps:
//!
//! 1. fit a mixture to the training loads and affiliate every training day
//!    with a state by the t-test;
//! 2. for each state, horizon `h ∈ {1, 2}` and expectile level `τ`, collect
//!    the target-day curves of the days in that state, enlarge them by a
//!    day-curve bootstrap and fit `Y ≈ X Γ(τ)`; the average fitted curve is
//!    the conditional-moment forecast for that state;
//! 3. per horizon, estimate combination weights over the moment forecasts
//!    and the three schedule channels by minimising the in-sample MAE.
//!
//! The VAR on factor loadings that often accompanies FASTEC is not part of
//! the forecast.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{self, GmmError, GmmFit, InitPolicy};
use crate::neural::clip_unit;
use crate::series::{SamplePair, N_GROUPS};
use crate::stats::{mean, variance};

pub const DEFAULT_TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 5000;
pub const WEIGHT_GRID_MIN: f64 = -2.0;
pub const WEIGHT_GRID_MAX: f64 = 2.0;
pub const WEIGHT_GRID_STEP: f64 = 0.01;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FastecError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("singular value decomposition failed")]
    Numeric,
    #[error("cross-validation: {0}")]
    Cv(String),
    #[error("bootstrap needs at least one curve")]
    EmptyInput,
    #[error("weight estimation: {0}")]
    Weight(String),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, FastecError>;

/// B-spline basis evaluated on the intra-day grid `s/S`, `s = 0..S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineDesign {
    pub x: DMatrix<f64>,
    pub knots: Vec<f64>,
    pub degree: usize,
}

impl SplineDesign {
    pub fn n_basis(&self) -> usize {
        self.x.ncols()
    }

    pub fn steps(&self) -> usize {
        self.x.nrows()
    }
}

/// `k = ⌊√n⌋` basis functions for `n` observations per curve.
pub fn default_basis_count(n: usize) -> usize {
    (n as f64).sqrt().floor() as usize
}

/// Clamped B-spline basis of the given degree with `k` functions on
/// equidistant interior knots over `[0, 1]`.
pub fn bspline_design(steps: usize, k: usize, degree: usize) -> Result<SplineDesign> {
    if k <= degree {
        return Err(FastecError::Param(format!(
            "{k} basis functions cannot carry degree {degree}"
        )));
    }
    if steps < k {
        return Err(FastecError::Param(format!(
            "{steps} grid points cannot identify {k} basis functions"
        )));
    }
    let n_interior = k - degree - 1;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..=n_interior).map(|j| j as f64 / (n_interior + 1) as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));

    let mut x = DMatrix::zeros(steps, k);
    let mut n = vec![0.0; knots.len() - 1];
    for s in 0..steps {
        let t = s as f64 / steps as f64;
        for (j, v) in n.iter_mut().enumerate() {
            *v = if knots[j] <= t && t < knots[j + 1] { 1.0 } else { 0.0 };
        }
        for p in 1..=degree {
            for j in 0..knots.len() - 1 - p {
                let left = if knots[j + p] > knots[j] {
                    (t - knots[j]) / (knots[j + p] - knots[j]) * n[j]
                } else {
                    0.0
                };
                let right = if knots[j + p + 1] > knots[j + 1] {
                    (knots[j + p + 1] - t) / (knots[j + p + 1] - knots[j + 1]) * n[j + 1]
                } else {
                    0.0
                };
                n[j] = left + right;
            }
        }
        for j in 0..k {
            x[(s, j)] = n[j];
        }
    }
    Ok(SplineDesign { x, knots, degree })
}

/// `ρ_τ(u) = |τ − 1(u < 0)| · u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Soft-thresholds the singular values of `m` by `lambda`.
pub fn prox_nuclear(m: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) || !(lambda >= 0.0) {
        return Err(FastecError::Param(
            "proximal step needs a finite matrix and λ ≥ 0".into(),
        ));
    }
    Ok(shrink(m, lambda)?.0)
}

/// Singular value soft-thresholding that also returns the nuclear norm of
/// the result. Strongly rectangular matrices are first reduced by a QR
/// factorisation so that only a small square SVD is needed.
fn shrink(m: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
    if m.is_empty() {
        return Ok((m.clone(), 0.0));
    }
    let (r, c) = m.shape();
    if c > 2 * r {
        let (t, norm) = shrink(&m.transpose(), lambda)?;
        return Ok((t.transpose(), norm));
    }
    if r > 2 * c {
        let qr = m.clone().qr();
        let (q, small) = (qr.q(), qr.r());
        let (shrunk, norm) = shrink_square(&small, lambda)?;
        return Ok((q * shrunk, norm));
    }
    shrink_square(m, lambda)
}

fn shrink_square(m: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
    if lambda == 0.0 {
        return Ok((m.clone(), nuclear_norm(m)?));
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or(FastecError::Numeric)?;
    let u = svd.u.ok_or(FastecError::Numeric)?;
    let v_t = svd.v_t.ok_or(FastecError::Numeric)?;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut norm = 0.0;
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        let shrunk = sigma - lambda;
        if shrunk > 0.0 {
            out += shrunk * u.column(i) * v_t.row(i);
            norm += shrunk;
        }
    }
    Ok((out, norm))
}

/// A fitted expectile coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectileFit {
    /// `Γ(τ)`, `k × q`.
    pub gamma: DMatrix<f64>,
    pub tau: f64,
    pub lambda: f64,
    /// Objective after every iteration, starting with the value at the
    /// initial point.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl ExpectileFit {
    /// `X Γ`, one fitted expectile curve per column.
    pub fn fitted(&self, design: &SplineDesign) -> DMatrix<f64> {
        &design.x * &self.gamma
    }

    /// Average of the fitted curves.
    pub fn mean_curve(&self, design: &SplineDesign) -> Vec<f64> {
        let fitted = self.fitted(design);
        let q = fitted.ncols() as f64;
        fitted.row_iter().map(|r| r.sum() / q).collect()
    }
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    tau: f64,
    lambda: f64,
    scale: f64,
}

impl Problem<'_> {
    fn smooth(&self, gamma: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut r = self.y - self.x * gamma;
        let mut loss = 0.0;
        for v in r.iter_mut() {
            let w = if *v < 0.0 { 1.0 - self.tau } else { self.tau };
            loss += w * *v * *v;
            *v *= w;
        }
        let grad = self.x.tr_mul(&r) * (-2.0 * self.scale);
        (loss * self.scale, grad)
    }

    fn smooth_value(&self, gamma: &DMatrix<f64>) -> f64 {
        let r = self.y - self.x * gamma;
        r.iter().map(|&u| expectile_loss(u, self.tau)).sum::<f64>() * self.scale
    }

    fn objective(&self, gamma: &DMatrix<f64>) -> Result<f64> {
        let penalty = if self.lambda > 0.0 {
            self.lambda * nuclear_norm(gamma)?
        } else {
            0.0
        };
        Ok(self.smooth_value(gamma) + penalty)
    }

    /// Proximal gradient step from `point`, with the objective at the result.
    fn step_from(&self, point: &DMatrix<f64>, step: f64) -> Result<(DMatrix<f64>, f64)> {
        let (_, grad) = self.smooth(point);
        let (next, norm) = shrink(&(point - grad * step), self.lambda * step)?;
        let value = self.smooth_value(&next) + self.lambda * norm;
        Ok((next, value))
    }
}

fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    let (r, c) = m.shape();
    let small = if c > 2 * r {
        m.transpose().qr().r()
    } else if r > 2 * c {
        m.clone().qr().r()
    } else {
        m.clone()
    };
    let sv = small
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or(FastecError::Numeric)?;
    Ok(sv.singular_values.sum())
}

fn check_fit_inputs(y: &DMatrix<f64>, design: &SplineDesign, tau: f64, lambda: f64) -> Result<()> {
    if y.nrows() != design.steps() || y.ncols() == 0 {
        return Err(FastecError::Param(format!(
            "curves have {} rows, design has {}",
            y.nrows(),
            design.steps()
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(FastecError::Param(format!("τ = {tau} outside (0, 1)")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(FastecError::Param(format!("λ = {lambda} must be finite and ≥ 0")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FastecError::Param("curves must be finite".into()));
    }
    Ok(())
}

/// Minimises `(TS)⁻¹ Σ ρ_τ(Y − XΓ) + λ‖Γ‖_*` from `Γ = 0` by accelerated
/// proximal gradient with function-value restart. Stops once the relative
/// objective change and the relative length of a plain proximal step both
/// fall below `tol`.
pub fn fastec_fit(
    y: &DMatrix<f64>,
    design: &SplineDesign,
    tau: f64,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ExpectileFit> {
    check_fit_inputs(y, design, tau, lambda)?;
    let start = DMatrix::zeros(design.n_basis(), y.ncols());
    fit_from(&design.x, y, tau, lambda, tol, max_iter, start, y.ncols())
}

#[allow(clippy::too_many_arguments)]
fn fit_from(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    tau: f64,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    start: DMatrix<f64>,
    n_cols: usize,
) -> Result<ExpectileFit> {
    let problem = Problem {
        x,
        y,
        tau,
        lambda,
        scale: 1.0 / (x.nrows() * n_cols) as f64,
    };
    let x_norm = crate::linalg::spectral_norm(x);
    let lipschitz = tau.max(1.0 - tau) * 2.0 * x_norm * x_norm * problem.scale;
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let mut gamma = start;
    let mut momentum = gamma.clone();
    let mut t = 1.0f64;
    let mut value = problem.objective(&gamma)?;
    let mut trace = vec![value];
    let mut converged = false;
    for _ in 0..max_iter {
        let (mut next, mut next_value) = problem.step_from(&momentum, step)?;
        if next_value > value {
            // restart with a plain proximal step, which cannot increase the
            // objective beyond rounding
            t = 1.0;
            (next, next_value) = problem.step_from(&gamma, step)?;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        momentum = &next + (&next - &gamma) * ((t - 1.0) / t_next);
        t = t_next;
        let change = (value - next_value).abs() / value.abs().max(f64::MIN_POSITIVE);
        gamma = next;
        value = next_value;
        trace.push(value);
        if value == 0.0 {
            converged = true;
            break;
        }
        if change < tol {
            // the objective flattens quadratically near the optimum, so also
            // require a plain proximal step to leave the iterate in place
            let (plain, _) = problem.step_from(&gamma, step)?;
            let moved = (&plain - &gamma).norm() / gamma.norm().max(1e-12);
            if moved < tol {
                converged = true;
                break;
            }
        }
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(FastecError::Numeric);
    }
    Ok(ExpectileFit {
        gamma,
        tau,
        lambda,
        objective_trace: trace,
        converged,
    })
}

/// λ at which the zero matrix becomes optimal: the spectral norm of the
/// loss gradient at `Γ = 0`.
pub fn lambda_max(y: &DMatrix<f64>, design: &SplineDesign, tau: f64) -> f64 {
    lambda_max_weighted(y, design, tau, y.ncols())
}

fn lambda_max_weighted(y: &DMatrix<f64>, design: &SplineDesign, tau: f64, n_cols: usize) -> f64 {
    let problem = Problem {
        x: &design.x,
        y,
        tau,
        lambda: 0.0,
        scale: 1.0 / (design.steps() * n_cols) as f64,
    };
    let zero = DMatrix::zeros(design.n_basis(), y.ncols());
    crate::linalg::spectral_norm(&problem.smooth(&zero).1)
}

/// `0` followed by `n − 1` log-spaced values from `10⁻⁴ λ_max` to `λ_max`,
/// in increasing order.
pub fn lambda_grid(y: &DMatrix<f64>, design: &SplineDesign, tau: f64, n: usize) -> Vec<f64> {
    grid_below(lambda_max(y, design, tau), n)
}

fn grid_below(top: f64, n: usize) -> Vec<f64> {
    let mut grid = vec![0.0];
    if top > 0.0 && n > 1 {
        let m = n - 1;
        for i in 0..m {
            let e = if m == 1 { 0.0 } else { -4.0 + 4.0 * i as f64 / (m - 1) as f64 };
            grid.push(top * 10f64.powf(e));
        }
    }
    grid
}

/// Outcome of the λ search.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Mean out-of-fold expectile loss per grid value.
    pub cv_loss: Vec<f64>,
}

/// Cross-validates λ over the default grid of ten values.
pub fn select_lambda(
    y: &DMatrix<f64>,
    design: &SplineDesign,
    tau: f64,
    folds: usize,
) -> Result<LambdaSelection> {
    let grid = lambda_grid(y, design, tau, 10);
    select_lambda_on_grid(y, design, tau, folds, &grid, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// Intra-day steps are dealt to folds round-robin; each fold is predicted
/// from a fit on the remaining steps of all curves. Ties go to the larger λ.
pub fn select_lambda_on_grid(
    y: &DMatrix<f64>,
    design: &SplineDesign,
    tau: f64,
    folds: usize,
    grid: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<LambdaSelection> {
    check_fit_inputs(y, design, tau, 0.0)?;
    cross_validate(y, design, tau, folds, grid, tol, max_iter, y.ncols())
}

#[allow(clippy::too_many_arguments)]
fn cross_validate(
    y: &DMatrix<f64>,
    design: &SplineDesign,
    tau: f64,
    folds: usize,
    grid: &[f64],
    tol: f64,
    max_iter: usize,
    n_cols: usize,
) -> Result<LambdaSelection> {
    if folds < 2 || folds > design.steps() {
        return Err(FastecError::Cv(format!(
            "{folds} folds over {} steps",
            design.steps()
        )));
    }
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(FastecError::Cv("λ grid must be non-empty and non-negative".into()));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let mut totals = vec![0.0; grid.len()];
    let steps = design.steps();
    for f in 0..folds {
        let held: Vec<usize> = (f..steps).step_by(folds).collect();
        let kept: Vec<usize> = (0..steps).filter(|s| s % folds != f).collect();
        let x_in = design.x.select_rows(&kept);
        let y_in = y.select_rows(&kept);
        let x_out = design.x.select_rows(&held);
        let y_out = y.select_rows(&held);
        // warm start along decreasing λ
        let mut start = DMatrix::zeros(design.n_basis(), y.ncols());
        for &g in &order {
            let fit = fit_from(&x_in, &y_in, tau, grid[g], tol, max_iter, start, n_cols)?;
            let resid = &y_out - &x_out * &fit.gamma;
            totals[g] += resid.iter().map(|&u| expectile_loss(u, tau)).sum::<f64>();
            start = fit.gamma;
        }
    }
    let cells = (steps * n_cols) as f64;
    let cv_loss: Vec<f64> = totals.iter().map(|t| t / cells).collect();
    let mut best = order[0];
    for &g in &order[1..] {
        if cv_loss[g] < cv_loss[best] {
            best = g;
        }
    }
    Ok(LambdaSelection {
        lambda: grid[best],
        grid: grid.to_vec(),
        cv_loss,
    })
}

/// Resamples whole day-curves with replacement.
pub fn bootstrap_enlarge(curves: &[Vec<f64>], target_count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if curves.is_empty() {
        return Err(FastecError::EmptyInput);
    }
    Ok(bootstrap_indices(curves.len(), target_count, seed)
        .into_iter()
        .map(|i| curves[i].clone())
        .collect())
}

fn bootstrap_indices(n: usize, target_count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..target_count).map(|_| rng.random_range(0..n)).collect()
}

/// Combination weights and the MAE they reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub values: Vec<f64>,
    pub mae: f64,
}

fn grid_values() -> Vec<f64> {
    let n = ((WEIGHT_GRID_MAX - WEIGHT_GRID_MIN) / WEIGHT_GRID_STEP).round() as usize;
    (0..=n)
        .map(|i| ((WEIGHT_GRID_MIN + i as f64 * WEIGHT_GRID_STEP) * 100.0).round() / 100.0)
        .collect()
}

/// Minimises the MAE of `Σ_j γ_j z_j` against `actual`, where the regressors
/// `z` are the moment forecasts followed by the exogenous channels.
///
/// Coordinate search from `γ = 0` over the grid `[−2, 2]` in steps of 0.01,
/// sweeping the coordinates in order until a sweep changes nothing. A grid
/// value replaces the current one only if it strictly lowers the MAE, so
/// among interchangeable regressors the first one takes the weight.
pub fn estimate_weights(
    moments: &DMatrix<f64>,
    exog: &DMatrix<f64>,
    actual: &[f64],
) -> Result<Weights> {
    let n = actual.len();
    if moments.nrows() != n || exog.nrows() != n || n == 0 {
        return Err(FastecError::Weight(format!(
            "{} actual values, {} moment rows, {} exogenous rows",
            n,
            moments.nrows(),
            exog.nrows()
        )));
    }
    let z = DMatrix::from_fn(n, moments.ncols() + exog.ncols(), |r, c| {
        if c < moments.ncols() {
            moments[(r, c)]
        } else {
            exog[(r, c - moments.ncols())]
        }
    });
    if z.iter().chain(actual).any(|v| !v.is_finite()) {
        return Err(FastecError::Weight("non-finite input".into()));
    }
    if z.iter().all(|&v| v == 0.0) {
        return Err(FastecError::Weight("all regressors are zero".into()));
    }
    let grid = grid_values();
    let m = z.ncols();
    let mut w = vec![0.0; m];
    let mut fitted = vec![0.0; n];
    let mae_of = |partial: &[f64], col: usize, v: f64| -> f64 {
        partial
            .iter()
            .zip(z.column(col).iter())
            .map(|(p, zc)| (p - v * zc).abs())
            .sum::<f64>()
            / n as f64
    };
    let mut best_mae = actual.iter().map(|a| a.abs()).sum::<f64>() / n as f64;
    for _sweep in 0..200 {
        let mut changed = false;
        for j in 0..m {
            if z.column(j).iter().all(|&v| v == 0.0) {
                continue;
            }
            let partial: Vec<f64> = (0..n)
                .map(|r| actual[r] - (fitted[r] - w[j] * z[(r, j)]))
                .collect();
            let scores: Vec<f64> = grid.par_iter().map(|&v| mae_of(&partial, j, v)).collect();
            let current = mae_of(&partial, j, w[j]);
            let (mut pick, mut pick_mae) = (w[j], current);
            for (&v, &s) in grid.iter().zip(&scores) {
                if s < pick_mae {
                    pick = v;
                    pick_mae = s;
                }
            }
            if pick != w[j] {
                for r in 0..n {
                    fitted[r] += (pick - w[j]) * z[(r, j)];
                }
                w[j] = pick;
                changed = true;
            }
            best_mae = pick_mae;
        }
        if !changed {
            break;
        }
    }
    Ok(Weights {
        values: w,
        mae: best_mae,
    })
}

/// FASTEC training options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastecConfig {
    pub taus: Vec<f64>,
    pub n_components: usize,
    /// Basis functions; `None` uses `⌊√S⌋`.
    pub n_splines: Option<usize>,
    pub degree: usize,
    pub folds: usize,
    pub lambda_grid_size: usize,
    /// Bootstrap sample size as a multiple of the available curves.
    pub bootstrap_factor: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub affiliation_level: f64,
    pub gmm_points: usize,
    pub seed: u64,
}

impl Default for FastecConfig {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAUS.to_vec(),
            n_components: gmm::DEFAULT_COMPONENTS,
            n_splines: None,
            degree: 3,
            folds: 5,
            lambda_grid_size: 10,
            bootstrap_factor: 10,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            affiliation_level: 0.05,
            gmm_points: gmm::DEFAULT_POINTS,
            seed: 0,
        }
    }
}

/// One conditional-moment fit for a (state, horizon, τ) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFit {
    pub state: usize,
    /// 1 or 2.
    pub horizon: usize,
    pub tau: f64,
    pub lambda: f64,
    /// Row-major `Γ(τ)`, one column per distinct bootstrap curve.
    pub gamma: Vec<f64>,
    pub gamma_rows: usize,
    pub gamma_cols: usize,
    /// Times each column's curve was drawn; repeating columns accordingly
    /// gives `Γ` over the whole bootstrap sample.
    pub multiplicity: Vec<usize>,
    /// Training days that were in the state; 0 means the pooled curves of
    /// all states were used.
    pub n_curves: usize,
    pub converged: bool,
    /// Average fitted expectile curve, the moment forecast.
    pub curve: Vec<f64>,
}

/// A trained regime-switching FASTEC forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastecModel {
    pub format_version: u32,
    pub steps: usize,
    pub n_splines: usize,
    pub degree: usize,
    pub taus: Vec<f64>,
    pub gmm: GmmFit,
    pub affiliation_level: f64,
    /// Ordered by state, then horizon, then τ.
    pub fits: Vec<MomentFit>,
    /// Combination weights per horizon: one per τ, then one per schedule
    /// channel.
    pub weights: Vec<Weights>,
}

/// Forecast with the affiliation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeForecast {
    pub values: Vec<f64>,
    pub state: usize,
    /// No state passed the t-test; the nearest mean was used.
    pub ambiguous: bool,
    pub clipped: usize,
}

fn fit_mixture(points: &[f64], k: usize, seed: u64, tol: f64) -> Result<GmmFit> {
    let mut k = k.min(points.len().saturating_sub(1)).max(1);
    loop {
        match gmm::em_fit(points, k, &InitPolicy::KMeansPlusPlus { seed }, tol, gmm::DEFAULT_MAX_ITER) {
            Ok(fit) => return Ok(fit.sorted_by_mean()),
            Err(GmmError::Collapse { .. }) if k > 1 => k -= 1,
            Err(GmmError::Collapse { .. }) => {
                // a constant series: one state at its value
                return Ok(GmmFit {
                    weights: vec![1.0],
                    means: vec![mean(points)],
                    variances: vec![variance(points).max(gmm::VARIANCE_FLOOR)],
                    loglik_trace: Vec::new(),
                    converged: true,
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn exog_block(sample: &SamplePair) -> DMatrix<f64> {
    sample.predictors.columns(0, N_GROUPS).into_owned()
}

/// A fit to a bootstrap sample, stored once per distinct curve.
struct ResampledFit {
    /// Columns belong to the distinct curves that were drawn.
    fit: ExpectileFit,
    /// How often each column's curve was drawn.
    multiplicity: Vec<usize>,
}

impl ResampledFit {
    /// `Γ` over all draws, in the order of `draws`.
    #[cfg(test)]
    fn expand(&self, draws: &[usize]) -> DMatrix<f64> {
        let mut distinct: Vec<usize> = draws.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        DMatrix::from_fn(self.fit.gamma.nrows(), draws.len(), |r, c| {
            self.fit.gamma[(r, distinct.binary_search(&draws[c]).unwrap())]
        })
    }

    /// Mean fitted curve over all draws.
    fn mean_curve(&self, design: &SplineDesign) -> Vec<f64> {
        let fitted = &design.x * &self.fit.gamma;
        let q: usize = self.multiplicity.iter().sum();
        fitted
            .row_iter()
            .map(|r| r.iter().zip(&self.multiplicity).map(|(v, &c)| v * c as f64).sum::<f64>() / q as f64)
            .collect()
    }
}

/// Fits the bootstrap sample `curves[draws[i]]` without materialising the
/// repeats. A curve drawn `c` times enters once, scaled by `√c`: the loss is
/// homogeneous of degree two and `‖Γ D‖_* = ‖Γ diag(√c)‖_*` for the
/// duplication map `D`, so the optimum and the λ path are unchanged.
fn fit_resampled(
    curves: &[Vec<f64>],
    draws: &[usize],
    design: &SplineDesign,
    tau: f64,
    cfg: &FastecConfig,
) -> Result<ResampledFit> {
    let mut counts = vec![0usize; curves.len()];
    for &d in draws {
        counts[d] += 1;
    }
    let used: Vec<usize> = (0..curves.len()).filter(|&i| counts[i] > 0).collect();
    let steps = design.steps();
    let root: Vec<f64> = used.iter().map(|&i| (counts[i] as f64).sqrt()).collect();
    let y = DMatrix::from_fn(steps, used.len(), |r, c| curves[used[c]][r] * root[c]);
    check_fit_inputs(&y, design, tau, 0.0)?;
    let q = draws.len();
    let grid = grid_below(lambda_max_weighted(&y, design, tau, q), cfg.lambda_grid_size);
    let lambda = if grid.len() > 1 {
        let folds = cfg.folds.min(steps);
        if folds < 2 {
            return Err(FastecError::Cv(format!("{folds} folds over {steps} steps")));
        }
        cross_validate(&y, design, tau, folds, &grid, cfg.tol, cfg.max_iter, q)?.lambda
    } else {
        grid[0]
    };
    let start = DMatrix::zeros(design.n_basis(), y.ncols());
    let mut fit = fit_from(&design.x, &y, tau, lambda, cfg.tol, cfg.max_iter, start, q)?;
    for (mut col, r) in fit.gamma.column_iter_mut().zip(&root) {
        col /= *r;
    }
    Ok(ResampledFit {
        fit,
        multiplicity: used.iter().map(|&i| counts[i]).collect(),
    })
}

impl FastecModel {
    pub fn design(&self) -> Result<SplineDesign> {
        bspline_design(self.steps, self.n_splines, self.degree)
    }

    fn moment(&self, state: usize, horizon: usize, tau_index: usize) -> &MomentFit {
        let per_state = 2 * self.taus.len();
        &self.fits[state * per_state + (horizon - 1) * self.taus.len() + tau_index]
    }

    pub fn train(samples: &[SamplePair], cfg: &FastecConfig) -> Result<FastecModel> {
        let first = samples
            .first()
            .ok_or_else(|| FastecError::Param("empty training set".into()))?;
        let steps = first.steps();
        if samples
            .iter()
            .any(|s| s.steps() != steps || s.target.len() != 2 * steps || s.predictors.ncols() != 1 + N_GROUPS)
        {
            return Err(FastecError::Param("samples have inconsistent shapes".into()));
        }
        if cfg.taus.is_empty() || cfg.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(FastecError::Param("expectile levels must lie in (0, 1)".into()));
        }
        let n_splines = cfg.n_splines.unwrap_or_else(|| default_basis_count(steps));
        let design = bspline_design(steps, n_splines, cfg.degree)?;

        let loads: Vec<f64> = samples.iter().flat_map(|s| s.load()).collect();
        let stride = loads.len().div_ceil(cfg.gmm_points.max(1)).max(1);
        let points: Vec<f64> = loads.iter().step_by(stride).copied().collect();
        let mixture = fit_mixture(&points, cfg.n_components, cfg.seed, gmm::DEFAULT_TOL)?;
        let states: Vec<usize> = samples
            .iter()
            .map(|s| gmm::affiliate(&s.load(), &mixture, cfg.affiliation_level).map(|a| a.state))
            .collect::<std::result::Result<_, _>>()?;

        let n_states = mixture.n_components();
        let mut jobs = Vec::new();
        for state in 0..n_states {
            for horizon in 1..=2 {
                for (ti, &tau) in cfg.taus.iter().enumerate() {
                    jobs.push((state, horizon, ti, tau));
                }
            }
        }
        let fits: Vec<MomentFit> = jobs
            .par_iter()
            .map(|&(state, horizon, _, tau)| {
                let members: Vec<&SamplePair> =
                    samples.iter().zip(&states).filter(|(_, &z)| z == state).map(|(s, _)| s).collect();
                let n_curves = members.len();
                let pool: Vec<&SamplePair> = if members.is_empty() {
                    samples.iter().collect()
                } else {
                    members
                };
                let curves: Vec<Vec<f64>> = pool
                    .iter()
                    .map(|s| s.target[(horizon - 1) * steps..horizon * steps].to_vec())
                    .collect();
                let seed = cfg.seed.wrapping_add(1 + 2 * state as u64 + horizon as u64);
                let draws = bootstrap_indices(curves.len(), curves.len() * cfg.bootstrap_factor.max(1), seed);
                let resampled = fit_resampled(&curves, &draws, &design, tau, cfg)?;
                let curve = resampled.mean_curve(&design);
                let ResampledFit { fit, multiplicity } = resampled;
                let lambda = fit.lambda;
                Ok(MomentFit {
                    state,
                    horizon,
                    tau,
                    lambda,
                    curve,
                    multiplicity,
                    gamma_rows: fit.gamma.nrows(),
                    gamma_cols: fit.gamma.ncols(),
                    gamma: fit.gamma.transpose().as_slice().to_vec(),
                    n_curves,
                    converged: fit.converged,
                })
            })
            .collect::<Result<_>>()?;

        let mut model = FastecModel {
            format_version: FORMAT_VERSION,
            steps,
            n_splines,
            degree: cfg.degree,
            taus: cfg.taus.clone(),
            gmm: mixture,
            affiliation_level: cfg.affiliation_level,
            fits,
            weights: Vec::new(),
        };
        let weights: Vec<Weights> = (1..=2)
            .map(|h| {
                let rows = samples.len() * steps;
                let mut moments = DMatrix::zeros(rows, model.taus.len());
                let mut exog = DMatrix::zeros(rows, N_GROUPS);
                let mut actual = Vec::with_capacity(rows);
                for (i, (sample, &state)) in samples.iter().zip(&states).enumerate() {
                    let x = exog_block(sample);
                    for s in 0..steps {
                        for ti in 0..model.taus.len() {
                            moments[(i * steps + s, ti)] = model.moment(state, h, ti).curve[s];
                        }
                        for g in 0..N_GROUPS {
                            exog[(i * steps + s, g)] = x[(s, g)];
                        }
                        actual.push(sample.target[(h - 1) * steps + s]);
                    }
                }
                estimate_weights(&moments, &exog, &actual)
            })
            .collect::<Result<_>>()?;
        model.weights = weights;
        Ok(model)
    }

    /// Affiliates the sample's day with a state and combines that state's
    /// moment forecasts for both target days.
    pub fn regime_forecast(&self, sample: &SamplePair) -> Result<RegimeForecast> {
        if sample.steps() != self.steps || sample.predictors.ncols() != 1 + N_GROUPS {
            return Err(FastecError::Param(format!(
                "sample has {}×{} predictors, model expects {}×{}",
                sample.steps(),
                sample.predictors.ncols(),
                self.steps,
                1 + N_GROUPS
            )));
        }
        let aff = gmm::affiliate(&sample.load(), &self.gmm, self.affiliation_level)?;
        let x = exog_block(sample);
        let n_tau = self.taus.len();
        let mut raw = Vec::with_capacity(2 * self.steps);
        for h in 1..=2 {
            let w = &self.weights[h - 1].values;
            for s in 0..self.steps {
                let mut v = 0.0;
                for (ti, wt) in w.iter().enumerate().take(n_tau) {
                    v += wt * self.moment(aff.state, h, ti).curve[s];
                }
                for g in 0..N_GROUPS {
                    v += w[n_tau + g] * x[(s, g)];
                }
                raw.push(v);
            }
        }
        let clipped = clip_unit(raw);
        Ok(RegimeForecast {
            values: clipped.values,
            state: aff.state,
            ambiguous: aff.ambiguous,
            clipped: clipped.clipped,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FastecError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: FastecModel =
            serde_json::from_str(text).map_err(|e| FastecError::Format(e.to_string()))?;
        if model.format_version != FORMAT_VERSION {
            return Err(FastecError::Format(format!(
                "unsupported format version {}",
                model.format_version
            )));
        }
        let expected = model.gmm.n_components() * 2 * model.taus.len();
        if model.fits.len() != expected || model.weights.len() != 2 {
            return Err(FastecError::Format("fit table does not match the model shape".into()));
        }
        if model.fits.iter().any(|f| {
            f.curve.len() != model.steps
                || f.gamma.len() != f.gamma_rows * f.gamma_cols
                || f.multiplicity.len() != f.gamma_cols
        }) || model.weights.iter().any(|w| w.values.len() != model.taus.len() + N_GROUPS)
        {
            return Err(FastecError::Format("inconsistent curve or weight lengths".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cox–de Boor by plain recursion.
    fn basis(knots: &[f64], j: usize, p: usize, t: f64) -> f64 {
        if p == 0 {
            return if knots[j] <= t && t < knots[j + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        if knots[j + p] > knots[j] {
            v += (t - knots[j]) / (knots[j + p] - knots[j]) * basis(knots, j, p - 1, t);
        }
        if knots[j + p + 1] > knots[j + 1] {
            v += (knots[j + p + 1] - t) / (knots[j + p + 1] - knots[j + 1]) * basis(knots, j + 1, p - 1, t);
        }
        v
    }

    fn seeded_matrix(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn design_partition_of_unity() {
        let d = bspline_design(96, 9, 3).unwrap();
        for r in d.x.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(default_basis_count(96), 9);
    }

    #[test]
    fn degree_zero_is_indicator() {
        let d = bspline_design(12, 4, 0).unwrap();
        for s in 0..12 {
            for j in 0..4 {
                assert_eq!(d.x[(s, j)], if s / 3 == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn design_matches_recursive_oracle() {
        for (k, deg) in [(9, 3), (6, 2), (12, 3), (5, 1)] {
            let d = bspline_design(96, k, deg).unwrap();
            for s in 0..96 {
                for j in 0..k {
                    let o = basis(&d.knots, j, deg, s as f64 / 96.0);
                    assert!((d.x[(s, j)] - o).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn design_errors() {
        assert!(matches!(bspline_design(96, 3, 3), Err(FastecError::Param(_))));
        assert!(matches!(bspline_design(5, 9, 3), Err(FastecError::Param(_))));
    }

    #[test]
    fn loss_values() {
        assert_eq!(expectile_loss(2.0, 0.5), 2.0);
        for tau in [0.1, 0.5, 0.9] {
            assert_eq!(expectile_loss(0.0, tau), 0.0);
        }
        assert!((expectile_loss(1.0, 0.9) - 0.9).abs() < 1e-15);
        assert!((expectile_loss(-1.0, 0.9) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn prox_cases() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0]));
        let p = prox_nuclear(&m, 1.0).unwrap();
        assert_eq!(p, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.0])));
        let r = seeded_matrix(1, 5, 7);
        assert_eq!(prox_nuclear(&r, 0.0).unwrap(), r);
        let top = crate::linalg::spectral_norm(&r);
        assert!(prox_nuclear(&r, top).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn median_level_least_squares() {
        let d = bspline_design(96, 9, 3).unwrap();
        let y = seeded_matrix(2, 96, 6);
        // the default tolerance bounds accuracy near 1e-6; tighten it
        let fit = fastec_fit(&y, &d, 0.5, 0.0, 1e-10, DEFAULT_MAX_ITER).unwrap();
        assert!(fit.converged);
        let chol = d.x.tr_mul(&d.x).cholesky().unwrap();
        let ls = chol.solve(&d.x.tr_mul(&y));
        for (a, b) in fit.gamma.iter().zip(ls.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn objective_trace_descends() {
        let d = bspline_design(48, 6, 3).unwrap();
        let y = seeded_matrix(3, 48, 20);
        for tau in [0.1, 0.5, 0.9] {
            for lambda in [0.0, 0.01, 0.1] {
                let fit = fastec_fit(&y, &d, tau, lambda, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
                let tr = &fit.objective_trace;
                assert!(tr.last().unwrap() <= &tr[0]);
                for w in tr[1..].windows(2) {
                    assert!(w[1] <= w[0] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn nuclear_norm_shrinks_with_lambda() {
        let d = bspline_design(48, 6, 3).unwrap();
        let y = seeded_matrix(4, 48, 15);
        let mut last = f64::INFINITY;
        let mut last_rank = usize::MAX;
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let fit = fastec_fit(&y, &d, 0.5, lambda, 1e-10, DEFAULT_MAX_ITER).unwrap();
            let nn = crate::linalg::nuclear_norm(&fit.gamma);
            let rank = crate::linalg::numerical_rank(&fit.gamma, 1e-8);
            assert!(nn <= last + 1e-9);
            assert!(rank <= last_rank);
            last = nn;
            last_rank = rank;
        }
    }

    #[test]
    fn median_fit_is_odd() {
        let d = bspline_design(48, 6, 3).unwrap();
        let y = seeded_matrix(5, 48, 8);
        let a = fastec_fit(&y, &d, 0.5, 0.05, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let b = fastec_fit(&(-&y), &d, 0.5, 0.05, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for (u, v) in a.gamma.iter().zip(b.gamma.iter()) {
            assert!((u + v).abs() < 1e-8);
        }
    }

    #[test]
    fn single_candidate_grid() {
        let d = bspline_design(48, 6, 3).unwrap();
        let y = seeded_matrix(6, 48, 5);
        let sel = select_lambda_on_grid(&y, &d, 0.5, 4, &[0.3], DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sel.lambda, 0.3);
        assert!(matches!(
            select_lambda_on_grid(&y, &d, 0.5, 1, &[0.3], DEFAULT_TOL, DEFAULT_MAX_ITER),
            Err(FastecError::Cv(_))
        ));
    }

    #[test]
    fn noise_prefers_shrinkage() {
        let d = bspline_design(96, 9, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let y = DMatrix::from_fn(96, 40, |_, _| rng.sample(normal));
        let sel = select_lambda(&y, &d, 0.5, 5).unwrap();
        let mut sorted = sel.grid.clone();
        sorted.sort_by(f64::total_cmp);
        let pos = sorted.iter().position(|&l| l == sel.lambda).unwrap();
        assert!(pos >= sorted.len() / 2, "picked {} at {pos}", sel.lambda);
    }

    #[test]
    fn noiseless_low_rank_is_recovered() {
        let d = bspline_design(96, 9, 3).unwrap();
        let a = seeded_matrix(8, 9, 1);
        let b = seeded_matrix(9, 1, 30);
        let y = &d.x * (a * b);
        let grid = lambda_grid(&y, &d, 0.5, 10);
        let sel = select_lambda_on_grid(&y, &d, 0.5, 5, &grid, 1e-10, DEFAULT_MAX_ITER).unwrap();
        let best = sel.cv_loss.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best < 1e-8, "{best}");
    }

    #[test]
    fn collapsed_bootstrap_matches_materialised() {
        let d = bspline_design(24, 5, 3).unwrap();
        let base = seeded_matrix(41, 24, 6);
        let curves: Vec<Vec<f64>> = base.column_iter().map(|c| c.iter().copied().collect()).collect();
        let draws = bootstrap_indices(curves.len(), 30, 9);
        let cfg = FastecConfig {
            folds: 3,
            lambda_grid_size: 4,
            tol: 1e-11,
            max_iter: 50_000,
            ..FastecConfig::default()
        };
        let fast = fit_resampled(&curves, &draws, &d, 0.25, &cfg).unwrap();
        let full = fast.expand(&draws);
        let y = DMatrix::from_fn(24, draws.len(), |r, c| curves[draws[c]][r]);
        let grid = lambda_grid(&y, &d, 0.25, 4);
        let sel = select_lambda_on_grid(&y, &d, 0.25, 3, &grid, 1e-11, 50_000).unwrap();
        assert_eq!(fast.fit.lambda, sel.lambda);
        let slow = fastec_fit(&y, &d, 0.25, sel.lambda, 1e-11, 50_000).unwrap();
        assert!((&full - &slow.gamma).amax() < 1e-6);
        let mean = fast.mean_curve(&d);
        for (a, b) in mean.iter().zip(slow.mean_curve(&d)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bootstrap_closure_and_determinism() {
        let curves: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64; 4]).collect();
        let a = bootstrap_enlarge(&curves, 7, 3).unwrap();
        assert_eq!(a.len(), 7);
        assert!(a.iter().all(|c| curves.contains(c)));
        assert_eq!(a, bootstrap_enlarge(&curves, 7, 3).unwrap());
        assert!(matches!(bootstrap_enlarge(&[], 3, 1), Err(FastecError::EmptyInput)));

        // same algorithm rerun from its own stream
        let big = bootstrap_enlarge(&curves, 700, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 7];
        for _ in 0..700 {
            counts[rng.random_range(0..7usize)] += 1;
        }
        let mut seen = [0usize; 7];
        for c in &big {
            seen[c[0] as usize] += 1;
        }
        assert_eq!(counts, seen);
    }

    #[test]
    fn weights_perfect_predictor() {
        let actual: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let moments = DMatrix::from_column_slice(50, 1, &actual);
        let w = estimate_weights(&moments, &DMatrix::zeros(50, 3), &actual).unwrap();
        assert_eq!(w.values[0], 1.0);
        assert_eq!(w.mae, 0.0);
    }

    #[test]
    fn weights_duplicate_tie_goes_first() {
        let actual: Vec<f64> = (0..50).map(|i| 0.5 + 0.1 * (i as f64).cos()).collect();
        let moments = DMatrix::from_fn(50, 2, |r, _| actual[r]);
        let w = estimate_weights(&moments, &DMatrix::zeros(50, 3), &actual).unwrap();
        assert_eq!(&w.values[..2], &[1.0, 0.0]);
    }

    #[test]
    fn weights_ignore_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let signal: Vec<f64> = (0..2000).map(|i| (i as f64 / 50.0).sin()).collect();
        let actual: Vec<f64> = signal.iter().map(|s| s + 0.05 * rng.sample(normal)).collect();
        let moments = DMatrix::from_fn(2000, 2, |r, c| if c == 0 { signal[r] } else { rng.sample(normal) });
        let w = estimate_weights(&moments, &DMatrix::zeros(2000, 3), &actual).unwrap();
        assert!(w.values[1].abs() < 0.1, "{:?}", w.values);
    }

    #[test]
    fn weights_reject_zero_regressors() {
        assert!(matches!(
            estimate_weights(&DMatrix::zeros(5, 2), &DMatrix::zeros(5, 3), &[1.0; 5]),
            Err(FastecError::Weight(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn prox_is_non_expansive(seed in 0u64..500, lambda in 0.0f64..2.0) {
            let a = seeded_matrix(seed, 4, 6);
            let b = seeded_matrix(seed + 10_000, 4, 6);
            let pa = prox_nuclear(&a, lambda).unwrap();
            let pb = prox_nuclear(&b, lambda).unwrap();
            proptest::prop_assert!((pa - pb).norm() <= (a - b).norm() + 1e-10);
        }
    }
}
