//! Load dataset model, CSV ingestion, schedule aggregation and alignment, and
//! construction of the supervised sample pairs used by every forecaster.
//!
//! A [`LoadDataset`] is a gap-free calendar of days. Each day carries
//! `freq_per_day` scaled load readings and the three aggregated production
//! schedule channels. [`build_samples`] turns a dataset into pairs of a
//! `freq_per_day × 4` predictor block for day `t` and the `2 · freq_per_day`
//! scaled loads of days `t+1` and `t+2`.

use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 15-minute resolution.
pub const STEPS_PER_DAY: usize = 96;
/// Number of aggregated schedule groups.
pub const N_GROUPS: usize = 3;
/// Predictor columns: three schedule groups followed by the load.
pub const N_PREDICTORS: usize = N_GROUPS + 1;
/// Days ahead covered by one target vector.
pub const HORIZON_DAYS: usize = 2;
/// Default lag between production and the recorded schedules (two hours).
pub const DEFAULT_SCHEDULE_LAG: usize = 8;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(NaiveDateTime),
    #[error("missing timestamp {0}")]
    MissingTimestamp(NaiveDateTime),
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("lag of {lag} steps must be below {freq} steps per day")]
    Lag { lag: usize, freq: usize },
    #[error("split error: {0}")]
    Split(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SeriesError>;

/// Min-max scaling of the load column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: f64,
    pub max: f64,
}

impl ScaleParams {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(SeriesError::Invalid(format!(
                "scale requires max > min, got min={min}, max={max}"
            )));
        }
        Ok(Self { min, max })
    }

    /// The scale of data that is already in load units of `[0, 1]`.
    pub fn identity() -> Self {
        Self { min: 0.0, max: 1.0 }
    }

    pub fn fit(values: &[f64]) -> Result<Self> {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if max <= min {
            return Err(SeriesError::Ingest(format!(
                "load column is constant ({min}); min-max scaling is undefined"
            )));
        }
        Self::new(min, max)
    }

    pub fn scale(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn unscale(&self, x: f64) -> f64 {
        self.min + x * (self.max - self.min)
    }
}

/// One calendar day of scaled load and aggregated schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarDay {
    pub date: NaiveDate,
    pub load: Vec<f64>,
    pub schedules: [Vec<f64>; N_GROUPS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadDataset {
    days: Vec<CalendarDay>,
    freq_per_day: usize,
    scale: ScaleParams,
}

impl LoadDataset {
    /// Validates the dataset invariants: every day has `freq_per_day`
    /// readings per channel, dates are consecutive, and loads are in `[0, 1]`.
    pub fn new(days: Vec<CalendarDay>, freq_per_day: usize, scale: ScaleParams) -> Result<Self> {
        if freq_per_day == 0 {
            return Err(SeriesError::Invalid("freq_per_day must be positive".into()));
        }
        for (i, day) in days.iter().enumerate() {
            if day.load.len() != freq_per_day
                || day.schedules.iter().any(|s| s.len() != freq_per_day)
            {
                return Err(SeriesError::Invalid(format!(
                    "day {} ({}) does not have {freq_per_day} readings per channel",
                    i, day.date
                )));
            }
            if let Some(v) = day.load.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(SeriesError::Invalid(format!(
                    "scaled load {v} on {} is outside [0, 1]",
                    day.date
                )));
            }
            if day.schedules.iter().flatten().any(|v| !v.is_finite()) {
                return Err(SeriesError::Invalid(format!(
                    "non-finite schedule value on {}",
                    day.date
                )));
            }
            if i > 0 && days[i - 1].date.succ_opt() != Some(day.date) {
                return Err(SeriesError::Invalid(format!(
                    "days {} and {} are not consecutive",
                    days[i - 1].date,
                    day.date
                )));
            }
        }
        Ok(Self {
            days,
            freq_per_day,
            scale,
        })
    }

    pub fn days(&self) -> &[CalendarDay] {
        &self.days
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn freq_per_day(&self) -> usize {
        self.freq_per_day
    }

    pub fn scale(&self) -> ScaleParams {
        self.scale
    }

    /// All scaled loads in chronological order.
    pub fn load_series(&self) -> Vec<f64> {
        self.days.iter().flat_map(|d| d.load.iter().copied()).collect()
    }

    /// One schedule channel in chronological order.
    pub fn schedule_series(&self, group: usize) -> Vec<f64> {
        self.days
            .iter()
            .flat_map(|d| d.schedules[group].iter().copied())
            .collect()
    }

    /// Keeps the days in `range`.
    pub fn slice_days(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.days.len() || range.start >= range.end {
            return Err(SeriesError::Split(format!(
                "day range {range:?} is invalid for {} days",
                self.days.len()
            )));
        }
        Self::new(self.days[range].to_vec(), self.freq_per_day, self.scale)
    }

    fn step(&self) -> Duration {
        Duration::seconds(86_400 / self.freq_per_day as i64)
    }

    /// Writes the dataset in the grouped CSV layout, in original load units.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "load", "group1", "group2", "group3"])?;
        let step = self.step();
        for day in &self.days {
            let mut ts = day.date.and_time(NaiveTime::MIN);
            for s in 0..self.freq_per_day {
                w.write_record([
                    ts.format("%Y-%m-%dT%H:%M:%S").to_string(),
                    self.scale.unscale(day.load[s]).to_string(),
                    day.schedules[0][s].to_string(),
                    day.schedules[1][s].to_string(),
                    day.schedules[2][s].to_string(),
                ])?;
                ts += step;
            }
        }
        w.flush().map_err(|e| SeriesError::Io {
            path: "<csv output>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// How the columns after `timestamp, load` are interpreted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnLayout {
    /// Three pre-aggregated group columns.
    Grouped,
    /// One column per product schedule; `groups[j]` is the group (1, 2 or 3)
    /// of the `j`-th schedule column.
    Raw { groups: Vec<usize> },
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
}

/// Reads a load CSV, validates the 15-minute grid, aggregates schedules and
/// scales the load into `[0, 1]`.
///
/// Schedule channels are divided by their largest absolute value so that all
/// predictors share a comparable range; zero channels stay zero.
pub fn ingest_csv(path: &Path, layout: &ColumnLayout) -> Result<LoadDataset> {
    let file = std::fs::File::open(path).map_err(|e| SeriesError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    ingest_reader(file, layout, STEPS_PER_DAY)
}

/// [`ingest_csv`] over any reader, with a configurable grid resolution.
pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    layout: &ColumnLayout,
    freq_per_day: usize,
) -> Result<LoadDataset> {
    if freq_per_day == 0 || 86_400 % freq_per_day != 0 {
        return Err(SeriesError::Ingest(format!(
            "{freq_per_day} steps per day does not divide a day into whole seconds"
        )));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let n_sched = match layout {
        ColumnLayout::Grouped => N_GROUPS,
        ColumnLayout::Raw { groups } => groups.len(),
    };
    if headers.len() != 2 + n_sched {
        return Err(SeriesError::Ingest(format!(
            "expected {} columns (timestamp, load, {n_sched} schedules), header has {}",
            2 + n_sched,
            headers.len()
        )));
    }

    let step = Duration::seconds(86_400 / freq_per_day as i64);
    let mut stamps: Vec<NaiveDateTime> = Vec::new();
    let mut loads = Vec::new();
    let mut sched_rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // data rows are numbered from 2 (the header is row 1)
        let row = i + 2;
        let ts = parse_timestamp(&record[0]).ok_or_else(|| {
            SeriesError::Ingest(format!("row {row}: cannot parse timestamp {:?}", &record[0]))
        })?;
        if let Some(prev) = stamps.last() {
            if ts == *prev {
                return Err(SeriesError::DuplicateTimestamp(ts));
            }
            if ts < *prev {
                return Err(SeriesError::Ingest(format!(
                    "row {row}: timestamp {ts} is earlier than {prev}"
                )));
            }
            if ts != *prev + step {
                return Err(SeriesError::MissingTimestamp(*prev + step));
            }
        } else if ts.time() != NaiveTime::MIN {
            return Err(SeriesError::Ingest(format!(
                "series must start at midnight, first timestamp is {ts}"
            )));
        }
        let mut values = Vec::with_capacity(record.len() - 1);
        for (j, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| SeriesError::NonNumeric {
                row,
                column: headers[j].to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(SeriesError::NonNumeric {
                    row,
                    column: headers[j].to_string(),
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
        stamps.push(ts);
        loads.push(values[0]);
        sched_rows.push(values[1..].to_vec());
    }

    if !stamps.len().is_multiple_of(freq_per_day) {
        let last = *stamps.last().expect("non-empty when remainder is non-zero");
        return Err(SeriesError::MissingTimestamp(last + step));
    }
    let n_days = stamps.len() / freq_per_day;
    if n_days < 3 {
        return Err(SeriesError::InsufficientData(format!(
            "{n_days} full days found, at least 3 are required"
        )));
    }

    let grouped: Vec<[f64; N_GROUPS]> = match layout {
        ColumnLayout::Grouped => sched_rows.iter().map(|r| [r[0], r[1], r[2]]).collect(),
        ColumnLayout::Raw { groups } => {
            let raw = DMatrix::from_fn(sched_rows.len(), n_sched, |r, c| sched_rows[r][c]);
            let agg = aggregate_schedules(&raw, groups)?;
            (0..agg.nrows())
                .map(|r| [agg[(r, 0)], agg[(r, 1)], agg[(r, 2)]])
                .collect()
        }
    };

    let scale = ScaleParams::fit(&loads)?;
    let mut sched_div = [1.0; N_GROUPS];
    for (g, div) in sched_div.iter_mut().enumerate() {
        let m = grouped.iter().fold(0.0_f64, |m, r| m.max(r[g].abs()));
        if m > 0.0 {
            *div = m;
        }
    }

    let days = (0..n_days)
        .map(|d| {
            let rows = d * freq_per_day..(d + 1) * freq_per_day;
            let load = loads[rows.clone()]
                .iter()
                .map(|&v| scale.scale(v).clamp(0.0, 1.0))
                .collect();
            let schedules = std::array::from_fn(|g| {
                grouped[rows.clone()].iter().map(|r| r[g] / sched_div[g]).collect()
            });
            CalendarDay {
                date: stamps[d * freq_per_day].date(),
                load,
                schedules,
            }
        })
        .collect();
    LoadDataset::new(days, freq_per_day, scale)
}

/// Sums raw schedule columns into the three groups.
///
/// `groups[j]` is the group label (1, 2 or 3) of column `j`; any other label
/// marks the column as unassigned.
pub fn aggregate_schedules(raw: &DMatrix<f64>, groups: &[usize]) -> Result<DMatrix<f64>> {
    if groups.len() != raw.ncols() {
        return Err(SeriesError::Grouping(format!(
            "{} group labels for {} schedule columns",
            groups.len(),
            raw.ncols()
        )));
    }
    if let Some(j) = groups.iter().position(|g| !(1..=N_GROUPS).contains(g)) {
        return Err(SeriesError::Grouping(format!(
            "schedule column {j} is not assigned to a group (label {})",
            groups[j]
        )));
    }
    let mut out = DMatrix::zeros(raw.nrows(), N_GROUPS);
    for (j, &g) in groups.iter().enumerate() {
        let mut dst = out.column_mut(g - 1);
        dst += raw.column(j);
    }
    Ok(out)
}

/// Advances every schedule channel by `lag_steps` so that the value at step
/// `i` becomes the recorded value at step `i + lag_steps`.
///
/// The last day loses its final `lag_steps` schedule readings and is dropped.
pub fn shift_schedules(dataset: &LoadDataset, lag_steps: usize) -> Result<LoadDataset> {
    let freq = dataset.freq_per_day;
    if lag_steps >= freq {
        return Err(SeriesError::Lag {
            lag: lag_steps,
            freq,
        });
    }
    if lag_steps == 0 {
        return Ok(dataset.clone());
    }
    let keep = dataset.n_days().saturating_sub(1);
    if keep == 0 {
        return Err(SeriesError::InsufficientData(
            "shifting schedules of a single day leaves no complete day".into(),
        ));
    }
    let channels: [Vec<f64>; N_GROUPS] = std::array::from_fn(|g| dataset.schedule_series(g));
    let days = dataset.days[..keep]
        .iter()
        .enumerate()
        .map(|(d, day)| CalendarDay {
            date: day.date,
            load: day.load.clone(),
            schedules: std::array::from_fn(|g| {
                let start = d * freq + lag_steps;
                channels[g][start..start + freq].to_vec()
            }),
        })
        .collect();
    LoadDataset::new(days, freq, dataset.scale)
}

/// One supervised example anchored at day `day_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub day_index: usize,
    /// `freq_per_day × 4`: schedule groups 1–3, then the day's scaled load.
    pub predictors: DMatrix<f64>,
    /// Scaled loads of the next two days.
    pub target: Vec<f64>,
}

impl SamplePair {
    pub fn steps(&self) -> usize {
        self.predictors.nrows()
    }

    /// The anchor day's scaled load (predictor column 4).
    pub fn load(&self) -> Vec<f64> {
        self.predictors.column(N_GROUPS).iter().copied().collect()
    }

    /// Schedule group `g` of the anchor day at step `s`.
    pub fn schedule(&self, s: usize, g: usize) -> f64 {
        self.predictors[(s, g)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSplit {
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

fn make_pair(dataset: &LoadDataset, t: usize) -> SamplePair {
    let freq = dataset.freq_per_day;
    let day = &dataset.days[t];
    let predictors = DMatrix::from_fn(freq, N_PREDICTORS, |s, c| {
        if c < N_GROUPS {
            day.schedules[c][s]
        } else {
            day.load[s]
        }
    });
    let target = (1..=HORIZON_DAYS)
        .flat_map(|h| dataset.days[t + h].load.iter().copied())
        .collect();
    SamplePair {
        day_index: t,
        predictors,
        target,
    }
}

/// Every sample pair of the dataset, in chronological order.
pub fn all_samples(dataset: &LoadDataset) -> Vec<SamplePair> {
    let n = dataset.n_days();
    (0..n.saturating_sub(HORIZON_DAYS))
        .map(|t| make_pair(dataset, t))
        .collect()
}

/// Builds the chronological train/test split.
///
/// Training pairs use only days before `split_at` (anchor and both target
/// days); test pairs are anchored at `split_at` or later. No day is shared
/// between the two sets.
pub fn build_samples(dataset: &LoadDataset, split_at: usize) -> Result<SampleSplit> {
    let n = dataset.n_days();
    if n < 1 + HORIZON_DAYS {
        return Err(SeriesError::InsufficientData(format!(
            "{n} days cannot form a sample pair"
        )));
    }
    let n_train = split_at.saturating_sub(HORIZON_DAYS);
    let n_test = n.saturating_sub(HORIZON_DAYS).saturating_sub(split_at);
    if split_at > n || n_train == 0 || n_test == 0 {
        return Err(SeriesError::Split(format!(
            "split at day {split_at} of {n} leaves {n_train} training and {n_test} test pairs"
        )));
    }
    let train = (0..n_train).map(|t| make_pair(dataset, t)).collect();
    let test = (split_at..split_at + n_test)
        .map(|t| make_pair(dataset, t))
        .collect();
    Ok(SampleSplit { train, test })
}

/// The default split day, keeping roughly seven of twelve months for training.
pub fn default_split(n_days: usize) -> usize {
    ((n_days as f64) * 212.0 / 365.0).round() as usize
}

/// Writes sample pairs as flattened rows: `day_index`, the predictor block in
/// row-major order, then the target.
pub fn write_samples_csv<W: Write>(samples: &[SamplePair], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = samples.first() {
        let mut header = vec!["day_index".to_string()];
        for s in 0..first.predictors.nrows() {
            for c in 0..first.predictors.ncols() {
                header.push(format!("x_{s}_{c}"));
            }
        }
        header.extend((0..first.target.len()).map(|p| format!("y_{p}")));
        w.write_record(&header)?;
    }
    for pair in samples {
        let mut row = vec![pair.day_index.to_string()];
        for s in 0..pair.predictors.nrows() {
            for c in 0..pair.predictors.ncols() {
                row.push(pair.predictors[(s, c)].to_string());
            }
        }
        row.extend(pair.target.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| SeriesError::Io {
        path: "<csv output>".into(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn csv_text(days: usize, freq: usize, load: impl Fn(usize) -> f64) -> String {
        let mut s = String::from("timestamp,load,g1,g2,g3\n");
        let start = NaiveDate::from_ymd_opt(2017, 1, 1)
            .unwrap()
            .and_time(NaiveTime::MIN);
        let step = Duration::seconds(86_400 / freq as i64);
        for i in 0..days * freq {
            let ts = start + step * i as i32;
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                ts.format("%Y-%m-%dT%H:%M:%S"),
                load(i),
                1.0,
                2.0,
                (i % 5) as f64
            ));
        }
        s
    }

    fn synthetic(days: usize, freq: usize) -> LoadDataset {
        let start = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
        let days = (0..days)
            .map(|d| CalendarDay {
                date: start + Duration::days(d as i64),
                load: (0..freq).map(|s| ((d * freq + s) % 7) as f64 / 7.0).collect(),
                schedules: std::array::from_fn(|g| {
                    (0..freq).map(|s| (d * freq + s) as f64 + 1000.0 * g as f64).collect()
                }),
            })
            .collect();
        LoadDataset::new(days, freq, ScaleParams::identity()).unwrap()
    }

    #[test]
    fn two_day_file_parses() {
        // three days are required; a 2-day file is rejected, a 3-day file has 96 readings per day
        let two = csv_text(2, 96, |i| i as f64);
        let err = ingest_reader(two.as_bytes(), &ColumnLayout::Grouped, 96).unwrap_err();
        assert!(matches!(err, SeriesError::InsufficientData(_)));
        let three = csv_text(3, 96, |i| i as f64);
        let ds = ingest_reader(three.as_bytes(), &ColumnLayout::Grouped, 96).unwrap();
        assert_eq!(ds.n_days(), 3);
        assert!(ds.days().iter().all(|d| d.load.len() == 96));
    }

    #[test]
    fn duplicate_timestamp_is_named() {
        let mut text = csv_text(3, 96, |i| i as f64);
        let line = text.lines().nth(5).unwrap().to_string();
        text = text.replacen(&format!("{line}\n"), &format!("{line}\n{line}\n"), 1);
        let err = ingest_reader(text.as_bytes(), &ColumnLayout::Grouped, 96).unwrap_err();
        match err {
            SeriesError::DuplicateTimestamp(ts) => {
                assert_eq!(ts.to_string(), "2017-01-01 01:00:00")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_row_and_bad_cell() {
        let text = csv_text(3, 96, |i| i as f64);
        let missing: String = text
            .lines()
            .enumerate()
            .filter(|(i, _)| *i != 10)
            .map(|(_, l)| format!("{l}\n"))
            .collect();
        let err = ingest_reader(missing.as_bytes(), &ColumnLayout::Grouped, 96).unwrap_err();
        assert!(matches!(err, SeriesError::MissingTimestamp(_)));

        let bad = text.replacen(",2,", ",abc,", 1);
        match ingest_reader(bad.as_bytes(), &ColumnLayout::Grouped, 96).unwrap_err() {
            SeriesError::NonNumeric { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "g2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn min_max_scaling() {
        let text = csv_text(3, 96, |i| 2.0 + 2.0 * i as f64);
        let ds = ingest_reader(text.as_bytes(), &ColumnLayout::Grouped, 96).unwrap();
        assert_eq!(ds.scale().min, 2.0);
        assert_eq!(ds.scale().max, 2.0 + 2.0 * (3 * 96 - 1) as f64);
        let loads = ds.load_series();
        assert_eq!(loads[0], 0.0);
        assert_eq!(*loads.last().unwrap(), 1.0);
    }

    #[test]
    fn constant_load_rejected() {
        let text = csv_text(3, 96, |_| 5.0);
        let err = ingest_reader(text.as_bytes(), &ColumnLayout::Grouped, 96).unwrap_err();
        assert!(matches!(err, SeriesError::Ingest(_)));
    }

    #[test]
    fn raw_layout_aggregates() {
        let mut text = String::from("timestamp,load,a,b,c,d\n");
        let start = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap().and_time(NaiveTime::MIN);
        for i in 0..3 * 4 {
            let ts = start + Duration::hours(6) * i;
            text.push_str(&format!("{},{},1,2,3,4\n", ts.format("%Y-%m-%d %H:%M:%S"), i));
        }
        let layout = ColumnLayout::Raw {
            groups: vec![1, 2, 1, 3],
        };
        let ds = ingest_reader(text.as_bytes(), &layout, 4).unwrap();
        // groups become 4, 2, 4 and are then divided by their maxima
        assert!(ds.schedule_series(0).iter().all(|&v| v == 1.0));
        assert!(ds.schedule_series(1).iter().all(|&v| v == 1.0));
        assert!(ds.schedule_series(2).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn aggregate_zero_and_indicator() {
        let zero = DMatrix::zeros(96, 72);
        let groups: Vec<usize> = (0..72).map(|j| j % 3 + 1).collect();
        let out = aggregate_schedules(&zero, &groups).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let mut ind = DMatrix::zeros(96, 72);
        ind.column_mut(0).fill(1.0);
        ind.column_mut(1).fill(1.0);
        ind.column_mut(2).fill(1.0);
        let out = aggregate_schedules(&ind, &groups).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn aggregate_matches_column_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = DMatrix::from_fn(96, 72, |_, _| rng.random::<f64>());
        let groups: Vec<usize> = (0..72).map(|_| rng.random_range(1..=3)).collect();
        let out = aggregate_schedules(&raw, &groups).unwrap();
        for s in 0..96 {
            for g in 1..=3 {
                let mut oracle = 0.0;
                for j in 0..72 {
                    if groups[j] == g {
                        oracle += raw[(s, j)];
                    }
                }
                assert!((out[(s, g - 1)] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unassigned_column_is_error() {
        let raw = DMatrix::zeros(4, 3);
        let err = aggregate_schedules(&raw, &[1, 0, 2]).unwrap_err();
        assert!(matches!(err, SeriesError::Grouping(_)));
        let err = aggregate_schedules(&raw, &[1, 2]).unwrap_err();
        assert!(matches!(err, SeriesError::Grouping(_)));
    }

    #[test]
    fn shift_identity_and_index_arithmetic() {
        let ds = synthetic(4, 96);
        assert_eq!(shift_schedules(&ds, 0).unwrap(), ds);
        let shifted = shift_schedules(&ds, 8).unwrap();
        assert_eq!(shifted.n_days(), 3);
        for g in 0..3 {
            let orig = ds.schedule_series(g);
            let new = shifted.schedule_series(g);
            for (s, v) in new.iter().enumerate() {
                assert_eq!(*v, orig[s + 8]);
            }
        }
        assert_eq!(shifted.load_series(), ds.load_series()[..3 * 96]);
        assert!(matches!(
            shift_schedules(&ds, 96).unwrap_err(),
            SeriesError::Lag { .. }
        ));
    }

    #[test]
    fn ten_days_give_eight_pairs() {
        let ds = synthetic(10, 96);
        let pairs = all_samples(&ds);
        assert_eq!(pairs.len(), 8);
        for p in &pairs {
            assert_eq!(p.predictors.shape(), (96, 4));
            assert_eq!(p.target.len(), 192);
            assert_eq!(p.load(), ds.days()[p.day_index].load);
            assert_eq!(p.target[..96], ds.days()[p.day_index + 1].load[..]);
            assert_eq!(p.target[96..], ds.days()[p.day_index + 2].load[..]);
        }
    }

    #[test]
    fn split_errors() {
        let ds = synthetic(10, 96);
        assert!(matches!(build_samples(&ds, 2), Err(SeriesError::Split(_))));
        assert!(matches!(build_samples(&ds, 8), Err(SeriesError::Split(_))));
        assert!(matches!(build_samples(&ds, 11), Err(SeriesError::Split(_))));
        let split = build_samples(&ds, 5).unwrap();
        assert_eq!(split.train.len(), 3);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn scale_round_trip() {
        let sc = ScaleParams::new(-3.5, 17.25).unwrap();
        for i in 0..=100 {
            let x = -3.5 + 20.75 * i as f64 / 100.0;
            assert!((sc.unscale(sc.scale(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_through_writer() {
        let ds = synthetic(3, 96);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), &ColumnLayout::Grouped, 96).unwrap();
        assert_eq!(back.n_days(), 3);
        let (a, b) = (ds.load_series(), back.load_series());
        // re-ingestion rescales to the observed range
        let sc = ScaleParams::fit(&a).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((sc.scale(*x) - y).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn aggregation_is_linear(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(8, 12, |_, _| rng.random::<f64>());
            let b = DMatrix::from_fn(8, 12, |_, _| rng.random::<f64>());
            let groups: Vec<usize> = (0..12).map(|_| rng.random_range(1..=3)).collect();
            let lhs = aggregate_schedules(&(&a + &b), &groups).unwrap();
            let rhs = aggregate_schedules(&a, &groups).unwrap() + aggregate_schedules(&b, &groups).unwrap();
            proptest::prop_assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }
}
