//! Exploratory statistics of the load process: autocorrelation, Epanechnikov
//! kernel density, and the ADF / KPSS stationarity tests.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::ols;
use crate::stats::{bartlett_long_run_variance, mean, normal_cdf};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("series is constant")]
    DegenerateSeries,
    #[error("empty input")]
    EmptyInput,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Acf {
    /// `values[l]` is the autocorrelation at lag `l`; `values[0] == 1`.
    pub values: Vec<f64>,
    /// Half-width of the 95% white-noise band, `1.96 / √n`.
    pub band: f64,
}

pub fn acf(series: &[f64], max_lag: usize) -> Result<Acf> {
    let n = series.len();
    if n == 0 {
        return Err(DiagnosticsError::EmptyInput);
    }
    if max_lag >= n {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "max_lag {max_lag} must be below the series length {n}"
        )));
    }
    let m = mean(series);
    let centered: Vec<f64> = series.iter().map(|x| x - m).collect();
    let denom: f64 = centered.iter().map(|x| x * x).sum();
    if denom <= 0.0 || centered.iter().all(|&x| x == 0.0) {
        return Err(DiagnosticsError::DegenerateSeries);
    }
    let values = (0..=max_lag)
        .map(|lag| {
            if lag == 0 {
                return 1.0;
            }
            centered[lag..]
                .iter()
                .zip(&centered)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / denom
        })
        .collect();
    Ok(Acf {
        values,
        band: 1.96 / (n as f64).sqrt(),
    })
}

/// A kernel density estimate tabulated on an equidistant grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl Kde {
    /// Trapezoid-rule integral of the tabulated density.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
            .sum()
    }

    /// Grid locations of strict local maxima.
    pub fn modes(&self) -> Vec<f64> {
        let f = &self.density;
        (1..f.len().saturating_sub(1))
            .filter(|&i| f[i] > f[i - 1] && f[i] >= f[i + 1] && f[i] > 0.0)
            .map(|i| self.grid[i])
            .collect()
    }
}

/// Bandwidth of 1.6% of the data range.
pub fn default_bandwidth(points: &[f64]) -> f64 {
    let (lo, hi) = min_max(points);
    0.016 * (hi - lo)
}

fn min_max(points: &[f64]) -> (f64, f64) {
    points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Epanechnikov KDE evaluated on a grid spanning `[min − h, max + h]`.
///
/// The grid spacing is at most `h / 20`, which keeps the trapezoid integral
/// within `1e-3` of one.
pub fn kde_epanechnikov(points: &[f64], bandwidth: f64) -> Result<Kde> {
    if points.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let h = bandwidth;
    let (lo, hi) = min_max(points);
    let (start, end) = (lo - h, hi + h);
    let n_grid = (((end - start) / (h / 20.0)).ceil() as usize + 1).max(512);
    let dx = (end - start) / (n_grid - 1) as f64;
    let grid: Vec<f64> = (0..n_grid).map(|i| start + dx * i as f64).collect();

    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let norm = 1.0 / (points.len() as f64 * h);
    let density = grid
        .iter()
        .map(|&x| {
            let first = sorted.partition_point(|&p| p < x - h);
            let last = sorted.partition_point(|&p| p <= x + h);
            norm * sorted[first..last]
                .iter()
                .map(|&p| epanechnikov((x - p) / h))
                .sum::<f64>()
        })
        .collect();
    Ok(Kde {
        bandwidth: h,
        grid,
        density,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestName {
    Adf,
    Kpss,
}

impl fmt::Display for TestName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestName::Adf => "ADF",
            TestName::Kpss => "KPSS",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    pub test_name: TestName,
    pub statistic: f64,
    pub p_value: f64,
    pub lags_used: usize,
    /// The statistic fell outside the tabulated range; `p_value` is the
    /// nearest table edge.
    pub p_value_clamped: bool,
}

/// `⌊12 (n/100)^{1/4}⌋`.
pub fn schwert_lags(n: usize) -> usize {
    (12.0 * (n as f64 / 100.0).powf(0.25)).floor() as usize
}

/// Lag order selection for the ADF test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LagChoice {
    Fixed(usize),
    /// AIC over `0..=schwert_lags(n)`.
    Auto,
}

// MacKinnon (1994) response surface, constant and no trend, one variable.
const ADF_TAU_MIN: f64 = -18.83;
const ADF_TAU_MAX: f64 = 2.74;
const ADF_TAU_STAR: f64 = -1.61;
const ADF_SMALL_P: [f64; 3] = [2.1659, 1.4412, 0.038269];
const ADF_LARGE_P: [f64; 4] = [1.7339, 0.93202, -0.12745, -0.010368];

fn polyval(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Approximate p-value of the ADF statistic (constant, no trend).
pub fn adf_p_value(tau: f64) -> (f64, bool) {
    if tau > ADF_TAU_MAX {
        (1.0, true)
    } else if tau < ADF_TAU_MIN {
        (0.0, true)
    } else if tau <= ADF_TAU_STAR {
        (normal_cdf(polyval(&ADF_SMALL_P, tau)), false)
    } else {
        (normal_cdf(polyval(&ADF_LARGE_P, tau)), false)
    }
}

/// Design for `Δy_t = α + β y_{t−1} + Σ_{i≤p} γ_i Δy_{t−i}`, using rows
/// `t = first..n` where `first ≥ p + 1`.
fn adf_design(y: &[f64], p: usize, first: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = y.len() - first;
    let dy = |t: usize| y[t] - y[t - 1];
    let x = DMatrix::from_fn(rows, p + 2, |r, c| {
        let t = first + r;
        match c {
            0 => 1.0,
            1 => y[t - 1],
            _ => dy(t - (c - 1)),
        }
    });
    let target = DVector::from_fn(rows, |r, _| dy(first + r));
    (x, target)
}

/// Augmented Dickey-Fuller test with a constant and no trend.
///
/// With [`LagChoice::Auto`] every lag order up to the Schwert bound is fitted
/// on a common sample and the AIC minimiser is refitted on all available rows.
pub fn adf_test(series: &[f64], lags: LagChoice) -> Result<StationarityReport> {
    let n = series.len();
    let max_lag = match lags {
        LagChoice::Fixed(p) => p,
        LagChoice::Auto => schwert_lags(n),
    };
    if n <= 20 + max_lag {
        return Err(DiagnosticsError::InsufficientData(format!(
            "ADF with {max_lag} lags needs more than {} observations, got {n}",
            20 + max_lag
        )));
    }
    if series.windows(2).all(|w| w[0] == w[1]) {
        return Err(DiagnosticsError::DegenerateSeries);
    }
    let p = match lags {
        LagChoice::Fixed(p) => p,
        LagChoice::Auto => {
            let first = max_lag + 1;
            let mut best = (f64::INFINITY, 0);
            for p in 0..=max_lag {
                let (x, y) = adf_design(series, p, first);
                let Some(fit) = ols(&x, &y) else { continue };
                let nobs = y.len() as f64;
                let aic = nobs * (fit.ssr / nobs).ln() + 2.0 * (p + 2) as f64;
                if aic < best.0 {
                    best = (aic, p);
                }
            }
            best.1
        }
    };
    let (x, y) = adf_design(series, p, p + 1);
    let fit = ols(&x, &y).ok_or(DiagnosticsError::DegenerateSeries)?;
    let dof = (y.len() - x.ncols()) as f64;
    let sigma2 = fit.ssr / dof;
    let se = (sigma2 * fit.xtx_inv[(1, 1)]).sqrt();
    if !(se > 0.0) {
        return Err(DiagnosticsError::DegenerateSeries);
    }
    let statistic = fit.coef[1] / se;
    let (p_value, clamped) = adf_p_value(statistic);
    Ok(StationarityReport {
        test_name: TestName::Adf,
        statistic,
        p_value,
        lags_used: p,
        p_value_clamped: clamped,
    })
}

const KPSS_CRIT: [f64; 4] = [0.347, 0.463, 0.574, 0.739];
const KPSS_P: [f64; 4] = [0.10, 0.05, 0.025, 0.01];

/// P-value of the level-stationarity KPSS statistic by linear interpolation
/// of the critical-value table, clamped to `[0.01, 0.10]`.
pub fn kpss_p_value(stat: f64) -> (f64, bool) {
    if stat < KPSS_CRIT[0] {
        return (KPSS_P[0], true);
    }
    if stat > KPSS_CRIT[3] {
        return (KPSS_P[3], true);
    }
    let i = (0..3)
        .find(|&i| stat <= KPSS_CRIT[i + 1])
        .expect("stat lies inside the table");
    let w = (stat - KPSS_CRIT[i]) / (KPSS_CRIT[i + 1] - KPSS_CRIT[i]);
    (KPSS_P[i] + w * (KPSS_P[i + 1] - KPSS_P[i]), false)
}

/// KPSS test of level stationarity with a Bartlett long-run variance.
/// `None` uses `⌊12 (n/100)^{1/4}⌋` lags.
pub fn kpss_test(series: &[f64], lags: Option<usize>) -> Result<StationarityReport> {
    let n = series.len();
    if n < 4 {
        return Err(DiagnosticsError::InsufficientData(format!(
            "KPSS needs at least 4 observations, got {n}"
        )));
    }
    let lags = lags.unwrap_or_else(|| schwert_lags(n));
    if lags >= n {
        return Err(DiagnosticsError::InsufficientData(format!(
            "KPSS with {lags} lags needs more than {lags} observations, got {n}"
        )));
    }
    let m = mean(series);
    let resid: Vec<f64> = series.iter().map(|x| x - m).collect();
    let mut partial = 0.0;
    let mut eta = 0.0;
    for e in &resid {
        partial += e;
        eta += partial * partial;
    }
    eta /= (n * n) as f64;
    let lrv = bartlett_long_run_variance(&resid, lags);
    if !(lrv > 0.0) {
        return Err(DiagnosticsError::DegenerateSeries);
    }
    let statistic = eta / lrv;
    let (p_value, clamped) = kpss_p_value(statistic);
    Ok(StationarityReport {
        test_name: TestName::Kpss,
        statistic,
        p_value,
        lags_used: lags,
        p_value_clamped: clamped,
    })
}

/// Text table with `test`, `p-value` and `lags` columns, one row per test.
/// Clamped p-values are marked with `*`.
pub fn format_stationarity_table(reports: &[StationarityReport]) -> String {
    let mut out = format!("{:<6}{:>10}{:>10}{:>7}\n", "", "test", "p-value", "lags");
    for r in reports {
        let p = format!("{:.2}{}", r.p_value, if r.p_value_clamped { "*" } else { "" });
        out.push_str(&format!(
            "{:<6}{:>10.2}{:>10}{:>7}\n",
            r.test_name.to_string(),
            r.statistic,
            p,
            r.lags_used
        ));
    }
    out
}
