//! Benchmarks: an ARX model fitted by least squares and naive persistence.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::ols;
use crate::neural::{clip_unit, Forecast};
use crate::series::{SamplePair, N_GROUPS};

/// One day of lags at 15-minute resolution.
pub const DEFAULT_LAGS: usize = 96;
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("design matrix is rank deficient")]
    Rank,
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// `y_i = c + Σ_l φ_l y_{i−l} + Σ_g β_g x_{g,i} + ε_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArxModel {
    pub format_version: u32,
    pub intercept: f64,
    /// `φ_1 … φ_p`.
    pub ar: Vec<f64>,
    /// One coefficient per schedule channel.
    pub exog: Vec<f64>,
    /// Channels without variation; their coefficient is pinned to zero.
    pub collinear: Vec<bool>,
}

impl ArxModel {
    pub fn new(intercept: f64, ar: Vec<f64>, exog: Vec<f64>) -> Result<Self> {
        if ar.is_empty() {
            return Err(BaselineError::Param("lag order must be at least 1".into()));
        }
        if std::iter::once(&intercept).chain(&ar).chain(&exog).any(|v| !v.is_finite()) {
            return Err(BaselineError::Param("coefficients must be finite".into()));
        }
        let collinear = vec![false; exog.len()];
        Ok(Self {
            format_version: FORMAT_VERSION,
            intercept,
            ar,
            exog,
            collinear,
        })
    }

    pub fn lags(&self) -> usize {
        self.ar.len()
    }

    /// Recursive multi-step forecast. `history` ends with the most recent
    /// observation; `exog_path[i]` holds the channels at forecast step `i`.
    pub fn forecast_path(&self, history: &[f64], exog_path: &[Vec<f64>]) -> Result<Vec<f64>> {
        let p = self.lags();
        if history.len() < p {
            return Err(BaselineError::Param(format!(
                "{} observations of history, {p} lags",
                history.len()
            )));
        }
        let mut buf: Vec<f64> = history[history.len() - p..].to_vec();
        let mut out = Vec::with_capacity(exog_path.len());
        for x in exog_path {
            if x.len() != self.exog.len() {
                return Err(BaselineError::Param("exogenous path has the wrong width".into()));
            }
            let n = buf.len();
            let mut y = self.intercept;
            for (l, phi) in self.ar.iter().enumerate() {
                y += phi * buf[n - 1 - l];
            }
            for (b, v) in self.exog.iter().zip(x) {
                y += b * v;
            }
            buf.push(y);
            out.push(y);
        }
        Ok(out)
    }

    /// Two-day forecast for a sample. Day `t` supplies the lagged loads; the
    /// schedule profile of day `t` is carried forward to both target days.
    pub fn forecast(&self, sample: &SamplePair) -> Result<Forecast> {
        let steps = sample.steps();
        if sample.predictors.ncols() != N_GROUPS + 1 || self.exog.len() != N_GROUPS {
            return Err(BaselineError::Param("sample has the wrong number of channels".into()));
        }
        let load = sample.load();
        let horizon = sample.target.len();
        let path: Vec<Vec<f64>> = (0..horizon)
            .map(|i| {
                let s = i % steps;
                (0..N_GROUPS).map(|g| sample.schedule(s, g)).collect()
            })
            .collect();
        Ok(clip_unit(self.forecast_path(&load, &path)?))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| BaselineError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ArxModel =
            serde_json::from_str(text).map_err(|e| BaselineError::Format(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(BaselineError::Format(format!(
                "unsupported format version {}",
                m.format_version
            )));
        }
        if m.ar.is_empty() || m.collinear.len() != m.exog.len() {
            return Err(BaselineError::Format("inconsistent coefficient lengths".into()));
        }
        Ok(m)
    }
}

/// Contiguous stretches of load and schedule observations.
fn segments(samples: &[SamplePair]) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut out: Vec<(Vec<f64>, Vec<Vec<f64>>)> = Vec::new();
    let mut prev: Option<usize> = None;
    for s in samples {
        if prev.is_none_or(|p| s.day_index != p + 1) {
            out.push((Vec::new(), Vec::new()));
        }
        let seg = out.last_mut().expect("pushed above");
        seg.0.extend(s.load());
        for r in 0..s.steps() {
            seg.1.push((0..N_GROUPS).map(|g| s.schedule(r, g)).collect());
        }
        prev = Some(s.day_index);
    }
    out
}

/// Least-squares fit on the predictor days of the training samples.
pub fn arx_fit(samples: &[SamplePair], lags: usize) -> Result<ArxModel> {
    let segs = segments(samples);
    let series: Vec<(&[f64], &[Vec<f64>])> =
        segs.iter().map(|(y, x)| (y.as_slice(), x.as_slice())).collect();
    arx_fit_series(&series, lags)
}

/// Least-squares fit on one or more contiguous series. Every element of
/// the exogenous vectors is one channel.
pub fn arx_fit_series(series: &[(&[f64], &[Vec<f64>])], lags: usize) -> Result<ArxModel> {
    if lags == 0 {
        return Err(BaselineError::Param("lag order must be at least 1".into()));
    }
    let n_exog = series
        .iter()
        .find_map(|(_, x)| x.first().map(Vec::len))
        .unwrap_or(0);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut target = Vec::new();
    for (y, x) in series {
        if x.len() != y.len() || x.iter().any(|v| v.len() != n_exog) {
            return Err(BaselineError::Param("load and exogenous lengths differ".into()));
        }
        for i in lags..y.len() {
            let mut row = Vec::with_capacity(1 + lags + n_exog);
            row.push(1.0);
            row.extend((1..=lags).map(|l| y[i - l]));
            row.extend_from_slice(&x[i]);
            rows.push(row);
            target.push(y[i]);
        }
    }
    let width = 1 + lags + n_exog;
    if rows.len() <= width {
        return Err(BaselineError::Param(format!(
            "{} usable observations for {width} coefficients",
            rows.len()
        )));
    }
    if rows.iter().flatten().chain(&target).any(|v| !v.is_finite()) {
        return Err(BaselineError::Param("non-finite observation".into()));
    }
    let collinear: Vec<bool> = (0..n_exog)
        .map(|g| {
            let c = 1 + lags + g;
            let first = rows[0][c];
            rows.iter().all(|r| r[c] == first)
        })
        .collect();
    let keep: Vec<usize> = (0..width)
        .filter(|&c| c <= lags || !collinear[c - 1 - lags])
        .collect();
    let x = DMatrix::from_fn(rows.len(), keep.len(), |r, c| rows[r][keep[c]]);
    let fit = ols(&x, &DVector::from_vec(target)).ok_or(BaselineError::Rank)?;
    let mut coef = vec![0.0; width];
    for (c, &k) in keep.iter().enumerate() {
        coef[k] = fit.coef[c];
    }
    Ok(ArxModel {
        format_version: FORMAT_VERSION,
        intercept: coef[0],
        ar: coef[1..=lags].to_vec(),
        exog: coef[1 + lags..].to_vec(),
        collinear,
    })
}

/// Repeats day `t` for both target days.
pub fn naive_forecast(sample: &SamplePair) -> Vec<f64> {
    let load = sample.load();
    let horizon = sample.target.len();
    (0..horizon).map(|i| load[i % load.len()]).collect()
}
