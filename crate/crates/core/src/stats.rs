//! Small numeric helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Biased (divide-by-n) variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" convention).
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&sorted, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn std_normal() -> Normal {
    Normal::standard()
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Bartlett-kernel long-run variance of a demeaned series, divided by `n`.
pub fn bartlett_long_run_variance(resid: &[f64], lags: usize) -> f64 {
    let n = resid.len() as f64;
    let autocov = |j: usize| -> f64 {
        resid[j..]
            .iter()
            .zip(resid)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n
    };
    let mut lrv = autocov(0);
    for j in 1..=lags.min(resid.len().saturating_sub(1)) {
        let w = 1.0 - j as f64 / (lags as f64 + 1.0);
        lrv += 2.0 * w * autocov(j);
    }
    lrv
}
