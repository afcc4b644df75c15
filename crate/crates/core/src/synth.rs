//! Seeded regime-switching load processes with schedule channels.
//!
//! A Markov chain at 15-minute resolution moves between working states with
//! geometric dwell times. The load is the state's mean plus AR(1) noise plus
//! a linear response to three smoothed on/off schedule channels, clipped to
//! `[0, 1]`. Schedules are written with the recording lag the pipeline
//! removes, so a generated file behaves like plant data.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::series::{CalendarDay, LoadDataset, ScaleParams, DEFAULT_SCHEDULE_LAG, N_GROUPS, STEPS_PER_DAY};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Param(String),
    #[error(transparent)]
    Series(#[from] crate::series::SeriesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// One working state of the machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub mean: f64,
    /// Expected dwell time in steps (geometric).
    pub mean_dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub regimes: Vec<Regime>,
    /// Per-step probability of a one-step load spike.
    pub jump_rate: f64,
    /// Spike height; the sign is random.
    pub jump_size: f64,
    /// Stationary standard deviation of the AR(1) noise.
    pub noise_scale: f64,
    pub ar_coef: f64,
    /// Load response to each schedule channel.
    pub coupling: [f64; N_GROUPS],
    /// Expected on/off dwell time of the schedule channels, in steps.
    pub schedule_dwell: f64,
    /// Moving-average window that smooths the schedule switches.
    pub schedule_smoothing: usize,
    /// Steps by which the recorded schedules trail the load.
    pub schedule_lag: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

impl SynthConfig {
    /// The standard two-state benchmark: one year, which after the schedule
    /// shift gives 300 training and 60 test samples when split at day 302.
    pub fn benchmark() -> Self {
        Self {
            n_days: 365,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
            regimes: vec![
                Regime {
                    mean: 0.3,
                    mean_dwell: 96.0,
                },
                Regime {
                    mean: 0.7,
                    mean_dwell: 96.0,
                },
            ],
            jump_rate: 0.0,
            jump_size: 0.0,
            noise_scale: 0.04,
            ar_coef: 0.8,
            coupling: [0.06, 0.04, 0.02],
            schedule_dwell: 32.0,
            schedule_smoothing: 4,
            schedule_lag: DEFAULT_SCHEDULE_LAG,
            seed: 20190101,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Param(m));
        if self.n_days == 0 {
            return bad("n_days must be positive".into());
        }
        if self.regimes.is_empty() {
            return bad("at least one regime is required".into());
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if !(r.mean > 0.0 && r.mean < 1.0) {
                return bad(format!("regime {i} mean {} outside (0, 1)", r.mean));
            }
            if !(r.mean_dwell >= 1.0) {
                return bad(format!("regime {i} dwell {} below one step", r.mean_dwell));
            }
        }
        if !(0.0..=1.0).contains(&self.jump_rate) || !(self.jump_size >= 0.0) {
            return bad("jump rate must be a probability and jump size non-negative".into());
        }
        if !(self.noise_scale >= 0.0) || !(self.ar_coef > -1.0 && self.ar_coef < 1.0) {
            return bad("noise scale must be ≥ 0 and |ar_coef| < 1".into());
        }
        if self.coupling.iter().any(|c| !c.is_finite()) {
            return bad("coupling coefficients must be finite".into());
        }
        if !(self.schedule_dwell >= 1.0) || self.schedule_smoothing == 0 {
            return bad("schedule dwell must be ≥ 1 and smoothing window ≥ 1".into());
        }
        Ok(())
    }

    /// Long-run share of time spent in each regime.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        // leaving a state picks one of the others uniformly, so the jump
        // chain is uniform and occupancy is proportional to dwell time
        let total: f64 = self.regimes.iter().map(|r| r.mean_dwell).sum();
        self.regimes.iter().map(|r| r.mean_dwell / total).collect()
    }
}

/// A generated dataset with the state behind every step.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: LoadDataset,
    pub labels: Vec<usize>,
}

fn pick(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let steps = STEPS_PER_DAY;
    let n = cfg.n_days * steps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.regimes.len();

    let mut labels = Vec::with_capacity(n);
    let mut state = pick(&mut rng, &cfg.stationary_distribution());
    for _ in 0..n {
        labels.push(state);
        if k > 1 && rng.random::<f64>() < 1.0 / cfg.regimes[state].mean_dwell {
            let next = rng.random_range(0..k - 1);
            state = if next >= state { next + 1 } else { next };
        }
    }

    // true schedules cover the lag so the recorded copy is complete
    let total = n + cfg.schedule_lag;
    let mut schedules: Vec<Vec<f64>> = Vec::with_capacity(N_GROUPS);
    for _ in 0..N_GROUPS {
        let mut on = rng.random::<bool>();
        let raw: Vec<f64> = (0..total + cfg.schedule_smoothing)
            .map(|_| {
                if rng.random::<f64>() < 1.0 / cfg.schedule_dwell {
                    on = !on;
                }
                if on {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let w = cfg.schedule_smoothing;
        schedules.push(
            (0..total)
                .map(|i| raw[i..i + w].iter().sum::<f64>() / w as f64)
                .collect(),
        );
    }

    let innovation = cfg.noise_scale * (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    let first: f64 = StandardNormal.sample(&mut rng);
    let mut noise = cfg.noise_scale * first;
    let mut load = Vec::with_capacity(n);
    for (i, &z) in labels.iter().enumerate() {
        if i > 0 {
            let e: f64 = StandardNormal.sample(&mut rng);
            noise = cfg.ar_coef * noise + innovation * e;
        }
        let mut y = cfg.regimes[z].mean + noise;
        for (c, sched) in cfg.coupling.iter().zip(&schedules) {
            y += c * sched[i + cfg.schedule_lag];
        }
        if cfg.jump_rate > 0.0 && rng.random::<f64>() < cfg.jump_rate {
            y += if rng.random::<bool>() { cfg.jump_size } else { -cfg.jump_size };
        }
        load.push(y.clamp(0.0, 1.0));
    }

    // recorded schedule at step i is the true one at i − lag
    let days = (0..cfg.n_days)
        .map(|d| {
            let date = cfg.start_date + chrono::Days::new(d as u64);
            let range = d * steps..(d + 1) * steps;
            CalendarDay {
                date,
                load: load[range.clone()].to_vec(),
                schedules: std::array::from_fn(|g| {
                    range.clone().map(|i| schedules[g][i]).collect()
                }),
            }
        })
        .collect();
    let dataset = LoadDataset::new(days, steps, ScaleParams::identity())?;
    Ok(SynthOutput { dataset, labels })
}

/// Writes the `timestamp,regime` sidecar for a generated dataset.
pub fn write_labels<W: Write>(out: W, output: &SynthOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "regime"])?;
    let steps = output.dataset.freq_per_day();
    let minutes = (24 * 60 / steps) as i64;
    for (d, day) in output.dataset.days().iter().enumerate() {
        let midnight = day.date.and_hms_opt(0, 0, 0).expect("midnight");
        for s in 0..steps {
            let ts = midnight + chrono::Duration::minutes(minutes * s as i64);
            w.write_record([
                ts.format("%Y-%m-%dT%H:%M:%S").to_string(),
                output.labels[d * steps + s].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
