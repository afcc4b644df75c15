//! Forecast accuracy metrics, the Diebold-Mariano comparison and the
//! comparison table.

use std::fmt::Write as _;

use thiserror::Error;

use crate::stats::{bartlett_long_run_variance, mean, normal_cdf, normal_quantile, quantile};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("the loss differential is identically zero")]
    DegenerateDifferential,
    #[error("series has zero variance")]
    DegenerateSeries,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Accuracy of one forecast. Metrics whose denominator vanishes are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub mase: Option<f64>,
    pub mape: Option<f64>,
    /// Actual values equal to zero; MAPE is undefined when this is positive.
    pub mape_zero_actuals: usize,
    pub rmse: f64,
    /// RMSE over the range of the actuals.
    pub nr_rmse: Option<f64>,
    /// RMSE over the mean of the actuals.
    pub nm_rmse: Option<f64>,
    /// RMSE over the interquartile range of the actuals.
    pub niqr_rmse: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0 && den.is_finite()).then(|| num / den)
}

pub fn compute_metrics(actual: &[f64], forecast: &[f64]) -> Result<MetricReport> {
    let n = actual.len();
    if n != forecast.len() || n < 2 {
        return Err(EvalError::Input(format!(
            "{n} actual and {} forecast values; need equal lengths of at least 2",
            forecast.len()
        )));
    }
    if actual.iter().chain(forecast).any(|v| !v.is_finite()) {
        return Err(EvalError::Input("non-finite value".into()));
    }
    let nf = n as f64;
    let mae = actual.iter().zip(forecast).map(|(y, f)| (y - f).abs()).sum::<f64>() / nf;
    let scale = actual.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (nf - 1.0);
    let mape_zero_actuals = actual.iter().filter(|&&y| y == 0.0).count();
    let mape = (mape_zero_actuals == 0).then(|| {
        actual
            .iter()
            .zip(forecast)
            .map(|(y, f)| ((y - f) / y).abs())
            .sum::<f64>()
            / nf
    });
    let rmse = (actual.iter().zip(forecast).map(|(y, f)| (y - f) * (y - f)).sum::<f64>() / nf).sqrt();
    let max = actual.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = actual.iter().cloned().fold(f64::INFINITY, f64::min);
    let iqr = quantile(actual, 0.75) - quantile(actual, 0.25);
    Ok(MetricReport {
        mae,
        mase: ratio(mae, scale),
        mape,
        mape_zero_actuals,
        rmse,
        nr_rmse: ratio(rmse, max - min),
        nm_rmse: ratio(rmse, mean(actual)),
        niqr_rmse: ratio(rmse, iqr),
    })
}

/// Diebold-Mariano statistic for the quadratic loss differential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmResult {
    /// Negative when the first error series is smaller.
    pub statistic: f64,
    /// Two-sided, standard normal reference.
    pub p_value: f64,
}

/// `d_t = a_t² − b_t²`, standardised by a Bartlett long-run variance with
/// `⌊n^{1/3}⌋` lags.
pub fn dm_test(errors_a: &[f64], errors_b: &[f64]) -> Result<DmResult> {
    let n = errors_a.len();
    if n != errors_b.len() || n < 10 {
        return Err(EvalError::Input(format!(
            "error series of lengths {n} and {}; need equal lengths of at least 10",
            errors_b.len()
        )));
    }
    if errors_a.iter().chain(errors_b).any(|v| !v.is_finite()) {
        return Err(EvalError::Input("non-finite error".into()));
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a * a - b * b).collect();
    dm_from_differential(&d)
}

/// The DM statistic from a given loss differential.
pub fn dm_from_differential(d: &[f64]) -> Result<DmResult> {
    if d.iter().all(|&v| v == 0.0) {
        return Err(EvalError::DegenerateDifferential);
    }
    let n = d.len();
    let d_bar = mean(d);
    let centred: Vec<f64> = d.iter().map(|v| v - d_bar).collect();
    let lags = (n as f64).cbrt().floor() as usize;
    let lrv = bartlett_long_run_variance(&centred, lags);
    if !(lrv > 0.0) {
        return Err(EvalError::DegenerateDifferential);
    }
    let statistic = d_bar / (lrv / n as f64).sqrt();
    let p_value = (2.0 * (1.0 - normal_cdf(statistic.abs()))).clamp(0.0, 1.0);
    Ok(DmResult { statistic, p_value })
}

/// Standardised order statistics against standard normal quantiles at
/// `(i − 0.5)/n`, as `(theoretical, sample)` pairs.
pub fn residual_qq(errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = errors.len();
    if n < 10 {
        return Err(EvalError::Input(format!("{n} residuals; need at least 10")));
    }
    if errors.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Input("non-finite residual".into()));
    }
    if errors.iter().all(|&e| e == errors[0]) {
        return Err(EvalError::DegenerateSeries);
    }
    let m = mean(errors);
    let sd = (errors.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - 1) as f64).sqrt();
    if sd == 0.0 {
        return Err(EvalError::DegenerateSeries);
    }
    let mut z: Vec<f64> = errors.iter().map(|e| (e - m) / sd).collect();
    z.sort_by(f64::total_cmp);
    Ok(z.into_iter()
        .enumerate()
        .map(|(i, v)| (normal_quantile((i as f64 + 0.5) / n as f64), v))
        .collect())
}

/// Significance stars: 1%, 5% and 10%.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Metric rows of the comparison table, in display order.
pub const TABLE_ROWS: [&str; 5] = ["MAPE", "MASE", "nRMSE", "niqRMSE", "nmRMSE"];

fn row_value(r: &MetricReport, row: &str) -> Option<f64> {
    match row {
        "MAPE" => r.mape,
        "MASE" => r.mase,
        "nRMSE" => r.nr_rmse,
        "niqRMSE" => r.niqr_rmse,
        "nmRMSE" => r.nm_rmse,
        _ => None,
    }
}

/// Per-model scores and DM results against the reference model.
#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    pub reports: Vec<MetricReport>,
    /// Index of the model the others are tested against.
    pub reference: usize,
    /// `dm[m]` compares the reference with model `m`; `None` for the
    /// reference itself or a degenerate differential.
    pub dm: Vec<Option<DmResult>>,
}

impl ComparisonTable {
    /// Scores every model on the same actuals.
    pub fn build(
        actual: &[f64],
        forecasts: &[(String, Vec<f64>)],
        reference: usize,
    ) -> Result<Self> {
        if reference >= forecasts.len() {
            return Err(EvalError::Input("reference model out of range".into()));
        }
        let reports = forecasts
            .iter()
            .map(|(_, f)| compute_metrics(actual, f))
            .collect::<Result<Vec<_>>>()?;
        let errors: Vec<Vec<f64>> = forecasts
            .iter()
            .map(|(_, f)| f.iter().zip(actual).map(|(p, y)| p - y).collect())
            .collect();
        let dm = (0..forecasts.len())
            .map(|m| {
                if m == reference {
                    return Ok(None);
                }
                match dm_test(&errors[reference], &errors[m]) {
                    Ok(r) => Ok(Some(r)),
                    Err(EvalError::DegenerateDifferential) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            models: forecasts.iter().map(|(n, _)| n.clone()).collect(),
            reports,
            reference,
            dm,
        })
    }

    /// Index of the model with the lowest value of a metric row.
    pub fn best(&self, row: &str) -> Option<usize> {
        self.reports
            .iter()
            .enumerate()
            .filter_map(|(i, r)| row_value(r, row).map(|v| (i, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// Fixed-width text table; `†` marks the best model per metric and the
    /// `D-M‡` row holds the statistics against the reference model.
    pub fn to_text(&self) -> String {
        let width = self.models.iter().map(|m| m.len()).max().unwrap_or(0).max(14);
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "Measure");
        for m in &self.models {
            let _ = write!(out, " {m:>width$}");
        }
        out.push('\n');
        for row in TABLE_ROWS {
            let best = self.best(row);
            let _ = write!(out, "{row:<10}");
            for (i, r) in self.reports.iter().enumerate() {
                let cell = match row_value(r, row) {
                    Some(v) if Some(i) == best => format!("{v:.3}†"),
                    Some(v) => format!("{v:.3}"),
                    None => "n/a".to_string(),
                };
                let _ = write!(out, " {cell:>width$}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<10}", "D-M‡");
        for (i, dm) in self.dm.iter().enumerate() {
            let cell = match dm {
                Some(r) => format!("{:.3}{}", r.statistic, stars(r.p_value)),
                None if i == self.reference => String::new(),
                None => "n/a".to_string(),
            };
            let _ = write!(out, " {cell:>width$}");
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "† best model per measure; ‡ DM test, quadratic loss, against {}; *** 1%, ** 5%, * 10%",
            self.models[self.reference]
        );
        out
    }

    /// Same layout as [`Self::to_text`] as CSV, with DM p-values on an extra
    /// row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["measure".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for row in TABLE_ROWS {
            let best = self.best(row);
            let mut rec = vec![row.to_string()];
            for (i, r) in self.reports.iter().enumerate() {
                rec.push(match row_value(r, row) {
                    Some(v) if Some(i) == best => format!("{v:.6}†"),
                    Some(v) => format!("{v:.6}"),
                    None => "NA".into(),
                });
            }
            w.write_record(&rec)?;
        }
        let mut stat = vec!["D-M‡".to_string()];
        let mut p = vec!["D-M p-value".to_string()];
        for (i, dm) in self.dm.iter().enumerate() {
            match dm {
                Some(r) => {
                    stat.push(format!("{:.6}{}", r.statistic, stars(r.p_value)));
                    p.push(format!("{:.6}", r.p_value));
                }
                None if i == self.reference => {
                    stat.push(String::new());
                    p.push(String::new());
                }
                None => {
                    stat.push("NA".into());
                    p.push("NA".into());
                }
            }
        }
        w.write_record(&stat)?;
        w.write_record(&p)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(seed: u64, n: usize, sd: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, sd).unwrap();
        (0..n).map(|_| rng.sample(normal)).collect()
    }

    #[test]
    fn perfect_forecast() {
        let y = [0.2, 0.5, 0.4, 0.9];
        let r = compute_metrics(&y, &y).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.mase, Some(0.0));
        assert_eq!(r.mape, Some(0.0));
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn hand_example() {
        let r = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r.mae - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.mase.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.mape.unwrap() - 1.0 / 9.0).abs() < 1e-12);
        assert!((r.rmse - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.nr_rmse.unwrap() - (1.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        assert!((r.nm_rmse.unwrap() - (1.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        assert!((r.niqr_rmse.unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn undefined_metrics() {
        let r = compute_metrics(&[0.0, 1.0, 0.0], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.mape, None);
        assert_eq!(r.mape_zero_actuals, 2);
        assert!(r.mase.is_some());
        let r = compute_metrics(&[0.4, 0.4, 0.4], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.mase, None);
        assert_eq!(r.nr_rmse, None);
        assert_eq!(r.niqr_rmse, None);
        assert!((r.nm_rmse.unwrap() - 0.25).abs() < 1e-12);
        assert!(compute_metrics(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn dm_cases() {
        let a = gaussian(1, 100, 1.0);
        assert_eq!(dm_test(&a, &a), Err(EvalError::DegenerateDifferential));
        let b = gaussian(2, 100, 1.0);
        let ab = dm_test(&a, &b).unwrap();
        let ba = dm_test(&b, &a).unwrap();
        assert_eq!(ab.statistic, -ba.statistic);
        assert_eq!(ab.p_value, ba.p_value);
        assert!(dm_test(&a[..5], &b[..5]).is_err());
    }

    #[test]
    fn dm_detects_smaller_errors() {
        let a = gaussian(3, 5000, 0.5f64.sqrt());
        let b = gaussian(4, 5000, 1.0);
        let r = dm_test(&a, &b).unwrap();
        assert!(r.statistic < -2.58, "{}", r.statistic);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn dm_on_shifted_differential() {
        // adding a constant to d shifts the mean but not the variance
        let d: Vec<f64> = gaussian(5, 200, 1.0);
        let shifted: Vec<f64> = d.iter().map(|v| v + 0.3).collect();
        let r0 = dm_from_differential(&d).unwrap();
        let r1 = dm_from_differential(&shifted).unwrap();
        let se = mean(&d) / r0.statistic;
        assert!((r1.statistic - (mean(&d) + 0.3) / se).abs() < 1e-9);
    }

    #[test]
    fn qq_cases() {
        let e = gaussian(6, 10_000, 1.0);
        let qq = residual_qq(&e).unwrap();
        for &(t, s) in &qq[100..9900] {
            assert!((t - s).abs() < 0.1, "{t} {s}");
        }
        let sym = [-3.0, -2.0, -1.5, -1.0, -0.2, 0.2, 1.0, 1.5, 2.0, 3.0];
        let qq = residual_qq(&sym).unwrap();
        for i in 0..5 {
            assert!((qq[i].0 + qq[9 - i].0).abs() < 1e-9);
            assert!((qq[i].1 + qq[9 - i].1).abs() < 1e-9);
        }
        assert_eq!(residual_qq(&[0.3; 12]), Err(EvalError::DegenerateSeries));
    }

    #[test]
    fn table_layout() {
        let actual: Vec<f64> = (0..50).map(|i| 0.5 + 0.3 * (i as f64 / 5.0).sin()).collect();
        let good: Vec<f64> = actual.iter().map(|v| v + 0.01).collect();
        let bad: Vec<f64> = actual.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.2 } else { -0.15 }).collect();
        let t = ComparisonTable::build(&actual, &[("LSTM".into(), good), ("ARX".into(), bad)], 0).unwrap();
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Measure"));
        for (line, row) in lines[1..6].iter().zip(TABLE_ROWS) {
            assert!(line.starts_with(row));
            assert!(line.contains('†'));
        }
        assert!(lines[6].starts_with("D-M‡"));
        assert!(lines[6].contains("***"));
        assert!(t.dm[1].unwrap().statistic < 0.0);
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.starts_with("measure,LSTM,ARX"));
    }

    proptest::proptest! {
        #[test]
        fn mase_is_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let y = gaussian(seed, 30, 1.0);
            let f = gaussian(seed + 5000, 30, 1.0);
            let r = compute_metrics(&y, &f).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let fs: Vec<f64> = f.iter().map(|v| a * v + b).collect();
            let rs = compute_metrics(&ys, &fs).unwrap();
            proptest::prop_assert!((r.mase.unwrap() - rs.mase.unwrap()).abs() < 1e-10);
        }

        #[test]
        fn normalised_rmse_identities(seed in 0u64..1000) {
            let y: Vec<f64> = gaussian(seed, 40, 1.0).iter().map(|v| v + 5.0).collect();
            let f = gaussian(seed + 1, 40, 1.0);
            let r = compute_metrics(&y, &f).unwrap();
            let max = y.iter().cloned().fold(f64::MIN, f64::max);
            let min = y.iter().cloned().fold(f64::MAX, f64::min);
            let m = y.iter().sum::<f64>() / 40.0;
            let mut s = y.clone();
            s.sort_by(f64::total_cmp);
            let q = |p: f64| { let h = 39.0 * p; let lo = h.floor() as usize; s[lo] + (h - lo as f64) * (s[(lo + 1).min(39)] - s[lo]) };
            proptest::prop_assert!((r.nr_rmse.unwrap() - r.rmse / (max - min)).abs() < 1e-10);
            proptest::prop_assert!((r.nm_rmse.unwrap() - r.rmse / m).abs() < 1e-10);
            proptest::prop_assert!((r.niqr_rmse.unwrap() - r.rmse / (q(0.75) - q(0.25))).abs() < 1e-10);
        }
    }
}
