//! The subcommands. Each writes into its own directory under the run's
//! output directory and finishes with a manifest.

use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use stlf::baselines::{self, ArxModel};
use stlf::diagnostics::{self, LagChoice};
use stlf::evaluation::{self, ComparisonTable};
use stlf::fastec::FastecModel;
use stlf::neural::{self, RnnParams};
use stlf::plot::{self, Mark, Series};
use stlf::series::{self, LoadDataset, SamplePair, SampleSplit};
use stlf::synth;

use crate::artifacts::ArtifactDir;
use crate::config::{Loaded, ModelKind};
use crate::error::{CliError, Result};

/// The shifted dataset and its train/test split.
pub struct Prepared {
    pub dataset: LoadDataset,
    pub split_day: usize,
    pub split: SampleSplit,
}

fn load_dataset(loaded: &Loaded) -> Result<LoadDataset> {
    let cfg = &loaded.config;
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::config("data.path: required by this subcommand"))?;
    let raw = series::ingest_csv(path, &cfg.data.layout)?;
    Ok(series::shift_schedules(&raw, cfg.data.schedule_lag)?)
}

pub fn prepare(loaded: &Loaded) -> Result<Prepared> {
    let dataset = load_dataset(loaded)?;
    let split_day = loaded
        .config
        .data
        .split_day
        .unwrap_or_else(|| series::default_split(dataset.n_days()));
    let split = series::build_samples(&dataset, split_day)?;
    Ok(Prepared {
        dataset,
        split_day,
        split,
    })
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

pub fn synth(loaded: &Loaded) -> Result<PathBuf> {
    let cfg = loaded.config.synth_config();
    let out = synth::generate(&cfg)?;
    let mut art = ArtifactDir::create(loaded.output_dir().join("synth"))?;
    let data = csv_bytes(|b| Ok(out.dataset.write_csv(b)?))?;
    art.write("load.csv", &data)?;
    let labels = csv_bytes(|b| Ok(synth::write_labels(b, &out)?))?;
    art.write("labels.csv", &labels)?;
    art.note("days", out.dataset.n_days());
    art.note("stationary_distribution", cfg.stationary_distribution());
    art.finish(loaded, "synth", None)
}

pub fn ingest(loaded: &Loaded) -> Result<PathBuf> {
    let p = prepare(loaded)?;
    let mut art = ArtifactDir::create(loaded.output_dir().join("ingest"))?;
    art.write("dataset.csv", &csv_bytes(|b| Ok(p.dataset.write_csv(b)?))?)?;
    art.write(
        "train_samples.csv",
        &csv_bytes(|b| Ok(series::write_samples_csv(&p.split.train, b)?))?,
    )?;
    art.write(
        "test_samples.csv",
        &csv_bytes(|b| Ok(series::write_samples_csv(&p.split.test, b)?))?,
    )?;
    let days = p.dataset.days();
    art.note("days", days.len());
    art.note("first_date", days.first().map(|d| d.date));
    art.note("last_date", days.last().map(|d| d.date));
    art.note("split_day", p.split_day);
    art.note("train_pairs", p.split.train.len());
    art.note("test_pairs", p.split.test.len());
    art.note("scale", p.dataset.scale());
    art.finish(loaded, "ingest", None)
}

pub fn diagnose(loaded: &Loaded) -> Result<PathBuf> {
    let dataset = load_dataset(loaded)?;
    let load = dataset.load_series();
    let mut art = ArtifactDir::create(loaded.output_dir().join("diagnose"))?;

    let adf = diagnostics::adf_test(&load, LagChoice::Auto)?;
    let kpss = diagnostics::kpss_test(&load, None)?;
    art.write(
        "stationarity.txt",
        diagnostics::format_stationarity_table(&[adf, kpss]).as_bytes(),
    )?;

    let max_lag = loaded.config.diagnose.max_lag.min(load.len().saturating_sub(1));
    let acf = diagnostics::acf(&load, max_lag)?;
    let mut text = String::from("lag,acf\n");
    for (lag, v) in acf.values.iter().enumerate() {
        text.push_str(&format!("{lag},{v}\n"));
    }
    art.write("acf.csv", text.as_bytes())?;
    let lags: Vec<f64> = (0..acf.values.len()).map(|l| l as f64).collect();
    let band = |sign: f64, name: &str| Series {
        name: name.into(),
        points: vec![(0.0, sign * acf.band), (max_lag as f64, sign * acf.band)],
    };
    let svg = plot::render(
        "Autocorrelation of the load",
        "lag (15-min steps)",
        "ACF",
        &[
            Series {
                name: "ACF".into(),
                points: lags.into_iter().zip(acf.values.iter().copied()).collect(),
            },
            band(1.0, "+95% band"),
            band(-1.0, "-95% band"),
        ],
        Mark::Line,
        false,
    );
    art.write("acf.svg", svg.as_bytes())?;

    let kde = diagnostics::kde_epanechnikov(&load, diagnostics::default_bandwidth(&load))?;
    let mut text = String::from("x,density\n");
    for (x, d) in kde.grid.iter().zip(&kde.density) {
        text.push_str(&format!("{x},{d}\n"));
    }
    art.write("kde.csv", text.as_bytes())?;
    let svg = plot::render(
        "Epanechnikov kernel density of the load",
        "scaled load",
        "density",
        &[Series {
            name: "KDE".into(),
            points: kde.grid.iter().copied().zip(kde.density.iter().copied()).collect(),
        }],
        Mark::Line,
        false,
    );
    art.write("kde.svg", svg.as_bytes())?;
    art.note("bandwidth", kde.bandwidth);
    art.note("modes", kde.modes());
    art.finish(loaded, "diagnose", None)
}

/// A fitted model of any kind.
pub enum Fitted {
    Rnn { params: RnnParams, loss: Vec<f64> },
    Fastec(Box<FastecModel>),
    Arx(ArxModel),
    Naive,
}

/// One model's test-set forecasts.
pub struct ModelForecast {
    pub values: Vec<f64>,
    pub clipped: usize,
    pub ambiguous: usize,
}

impl Fitted {
    pub fn train(kind: ModelKind, loaded: &Loaded, train: &[SamplePair]) -> Result<Self> {
        let cfg = &loaded.config;
        Ok(match kind {
            ModelKind::Lstm | ModelKind::Gru => {
                let cell = kind.cell().expect("recurrent model");
                let t = neural::train(cell, train, &cfg.train_config(cell))?;
                Fitted::Rnn {
                    params: t.params,
                    loss: t.loss_history,
                }
            }
            ModelKind::Fastec => Fitted::Fastec(Box::new(FastecModel::train(train, &cfg.fastec_config())?)),
            ModelKind::Arx => Fitted::Arx(baselines::arx_fit(train, cfg.models.arx.lags)?),
            ModelKind::Naive => Fitted::Naive,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(match self {
            Fitted::Rnn { params, .. } => {
                let mut buf = Vec::new();
                params.write_to(&mut buf)?;
                buf
            }
            Fitted::Fastec(m) => m.to_json()?.into_bytes(),
            Fitted::Arx(m) => m.to_json()?.into_bytes(),
            Fitted::Naive => Vec::new(),
        })
    }

    pub fn read(kind: ModelKind, path: &Path) -> Result<Self> {
        if kind == ModelKind::Naive {
            return Ok(Fitted::Naive);
        }
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Data(format!(
                "no trained {kind} model at {}; run `stlf train {}` first",
                path.display(),
                kind.id()
            )),
            _ => CliError::io(path, e),
        })?;
        Ok(match kind {
            ModelKind::Lstm | ModelKind::Gru => {
                let params = RnnParams::read_from(BufReader::new(bytes.as_slice()))?;
                if Some(params.kind()) != kind.cell() {
                    return Err(CliError::Model(format!("{} holds a {} model", path.display(), params.kind())));
                }
                Fitted::Rnn {
                    params,
                    loss: Vec::new(),
                }
            }
            ModelKind::Fastec => Fitted::Fastec(Box::new(FastecModel::from_json(&utf8(&bytes, path)?)?)),
            ModelKind::Arx => Fitted::Arx(ArxModel::from_json(&utf8(&bytes, path)?)?),
            ModelKind::Naive => unreachable!(),
        })
    }

    pub fn forecast(&self, test: &[SamplePair]) -> Result<ModelForecast> {
        let mut out = ModelForecast {
            values: Vec::new(),
            clipped: 0,
            ambiguous: 0,
        };
        for sample in test {
            match self {
                Fitted::Rnn { params, .. } => {
                    let f = neural::forecast_nn(params, &sample.predictors)?;
                    out.clipped += f.clipped;
                    out.values.extend(f.values);
                }
                Fitted::Fastec(m) => {
                    let f = m.regime_forecast(sample)?;
                    out.clipped += f.clipped;
                    out.ambiguous += usize::from(f.ambiguous);
                    out.values.extend(f.values);
                }
                Fitted::Arx(m) => {
                    let f = m.forecast(sample)?;
                    out.clipped += f.clipped;
                    out.values.extend(f.values);
                }
                Fitted::Naive => out.values.extend(baselines::naive_forecast(sample)),
            }
        }
        Ok(out)
    }

    fn notes(&self, art: &mut ArtifactDir, prefix: &str) -> Result<()> {
        match self {
            Fitted::Rnn { params, loss } => {
                art.note(&format!("{prefix}parameters"), params.n_params());
                art.note(&format!("{prefix}final_loss"), loss.last());
                let mut text = String::from("epoch,loss\n");
                for (i, l) in loss.iter().enumerate() {
                    text.push_str(&format!("{},{l}\n", i + 1));
                }
                art.write(&format!("{prefix}loss.csv"), text.as_bytes())?;
            }
            Fitted::Fastec(m) => {
                art.note(&format!("{prefix}states"), m.gmm.n_components());
                art.note(&format!("{prefix}weights"), &m.weights);
                art.note(
                    &format!("{prefix}unconverged_fits"),
                    m.fits.iter().filter(|f| !f.converged).count(),
                );
            }
            Fitted::Arx(m) => {
                art.note(&format!("{prefix}collinear_exog"), &m.collinear);
            }
            Fitted::Naive => {}
        }
        Ok(())
    }
}

fn utf8(bytes: &[u8], path: &Path) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| CliError::Model(format!("{} is not UTF-8 text", path.display())))
}

fn model_path(loaded: &Loaded, kind: ModelKind) -> PathBuf {
    loaded.output_dir().join("train").join(kind.id()).join(kind.model_file())
}

pub fn train(loaded: &Loaded, kind: ModelKind) -> Result<PathBuf> {
    if kind == ModelKind::Naive {
        return Err(CliError::config("naive persistence has no parameters to train"));
    }
    let p = prepare(loaded)?;
    let fitted = Fitted::train(kind, loaded, &p.split.train)?;
    let mut art = ArtifactDir::create(loaded.output_dir().join("train").join(kind.id()))?;
    art.write(kind.model_file(), &fitted.to_bytes()?)?;
    fitted.notes(&mut art, "")?;
    art.note("train_pairs", p.split.train.len());
    art.finish(loaded, "train", Some(kind))
}

/// Long-format forecast table: one row per sample and step.
pub fn forecast_csv(dataset: &LoadDataset, test: &[SamplePair], values: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["anchor_day", "anchor_date", "target_date", "step", "actual", "forecast"])?;
    let days = dataset.days();
    let mut k = 0;
    for s in test {
        let steps = s.steps();
        for (i, actual) in s.target.iter().enumerate() {
            let anchor = days[s.day_index].date;
            let target = days[s.day_index + 1 + i / steps].date;
            w.write_record([
                s.day_index.to_string(),
                anchor.to_string(),
                target.to_string(),
                (i % steps).to_string(),
                actual.to_string(),
                values[k].to_string(),
            ])?;
            k += 1;
        }
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

fn read_forecast_csv(path: &Path, kind: ModelKind) -> Result<(Vec<f64>, Vec<f64>)> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Data(format!(
            "no {kind} forecasts at {}; run `stlf forecast {}` first",
            path.display(),
            kind.id()
        )),
        _ => CliError::io(path, e),
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    let (mut actual, mut forecast) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Data(format!("{}: malformed row {:?}", path.display(), rec)))
        };
        actual.push(parse(4)?);
        forecast.push(parse(5)?);
    }
    Ok((actual, forecast))
}

pub fn forecast(loaded: &Loaded, kind: ModelKind) -> Result<PathBuf> {
    let p = prepare(loaded)?;
    let fitted = Fitted::read(kind, &model_path(loaded, kind))?;
    let f = fitted.forecast(&p.split.test)?;
    let mut art = ArtifactDir::create(loaded.output_dir().join("forecast").join(kind.id()))?;
    art.write("forecast.csv", &forecast_csv(&p.dataset, &p.split.test, &f.values)?)?;
    art.note("test_pairs", p.split.test.len());
    art.note("clipped", f.clipped);
    if kind == ModelKind::Fastec {
        art.note("ambiguous_affiliations", f.ambiguous);
    }
    art.finish(loaded, "forecast", Some(kind))
}

fn flatten_targets(test: &[SamplePair]) -> Vec<f64> {
    test.iter().flat_map(|s| s.target.iter().copied()).collect()
}

/// Writes the comparison table, QQ plots and the day-ahead overlay.
fn write_evaluation(
    art: &mut ArtifactDir,
    loaded: &Loaded,
    test: &[SamplePair],
    forecasts: &[(ModelKind, Vec<f64>)],
) -> Result<ComparisonTable> {
    let actual = flatten_targets(test);
    let eval = &loaded.config.evaluate;
    let reference = forecasts
        .iter()
        .position(|(k, _)| *k == eval.reference)
        .ok_or_else(|| CliError::config("evaluate.reference: not among the evaluated models"))?;
    let named: Vec<(String, Vec<f64>)> = forecasts.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let table = ComparisonTable::build(&actual, &named, reference)?;
    art.write("metrics.txt", table.to_text().as_bytes())?;
    let mut csv_buf = Vec::new();
    table.write_csv(&mut csv_buf)?;
    art.write("metrics.csv", &csv_buf)?;

    for (kind, values) in forecasts {
        let errors: Vec<f64> = values.iter().zip(&actual).map(|(f, y)| f - y).collect();
        match evaluation::residual_qq(&errors) {
            Ok(points) => {
                let svg = plot::render(
                    &format!("Normal QQ plot of {kind} residuals"),
                    "theoretical quantile",
                    "standardised residual",
                    &[Series {
                        name: kind.to_string(),
                        points,
                    }],
                    Mark::Dots,
                    true,
                );
                art.write(&format!("qq_{}.svg", kind.id()), svg.as_bytes())?;
            }
            Err(evaluation::EvalError::DegenerateSeries) => {
                art.note(&format!("qq_{}", kind.id()), "constant residuals; no plot");
            }
            Err(e) => return Err(e.into()),
        }
    }

    // day-ahead halves tile the test period without overlap
    let day_ahead = |v: &[f64]| -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for (j, s) in test.iter().enumerate() {
            let steps = s.steps();
            for i in 0..steps {
                pts.push(((j * steps + i) as f64, v[j * 2 * steps + i]));
            }
        }
        pts
    };
    let mut lines = vec![Series {
        name: "actual".into(),
        points: day_ahead(&actual),
    }];
    for (kind, values) in forecasts {
        lines.push(Series {
            name: kind.to_string(),
            points: day_ahead(values),
        });
    }
    let svg = plot::render(
        "Day-ahead forecasts over the test period",
        "step",
        "scaled load",
        &lines,
        Mark::Line,
        false,
    );
    art.write("overlay.svg", svg.as_bytes())?;
    art.note("test_pairs", test.len());
    art.note("reference", eval.reference);
    Ok(table)
}

pub fn evaluate(loaded: &Loaded) -> Result<PathBuf> {
    let p = prepare(loaded)?;
    let actual = flatten_targets(&p.split.test);
    let mut forecasts = Vec::new();
    for &kind in &loaded.config.evaluate.models {
        let path = loaded
            .output_dir()
            .join("forecast")
            .join(kind.id())
            .join("forecast.csv");
        let (a, f) = read_forecast_csv(&path, kind)?;
        if a != actual {
            return Err(CliError::Data(format!(
                "{} does not match the configured test period; rerun `stlf forecast {}`",
                path.display(),
                kind.id()
            )));
        }
        forecasts.push((kind, f));
    }
    let mut art = ArtifactDir::create(loaded.output_dir().join("evaluate"))?;
    write_evaluation(&mut art, loaded, &p.split.test, &forecasts)?;
    art.finish(loaded, "evaluate", None)
}

/// Trains every evaluated model in parallel, forecasts the test period and
/// writes the comparison.
pub fn compare(loaded: &Loaded) -> Result<PathBuf> {
    let p = prepare(loaded)?;
    let kinds = loaded.config.evaluate.models.clone();
    let fitted: Vec<Fitted> = kinds
        .par_iter()
        .map(|&k| Fitted::train(k, loaded, &p.split.train))
        .collect::<Result<_>>()?;

    let mut art = ArtifactDir::create(loaded.output_dir().join("compare"))?;
    let mut forecasts = Vec::new();
    for (&kind, model) in kinds.iter().zip(&fitted) {
        if kind != ModelKind::Naive {
            art.write(&format!("models/{}/{}", kind.id(), kind.model_file()), &model.to_bytes()?)?;
            model.notes(&mut art, &format!("models/{}/", kind.id()))?;
        }
        let f = model.forecast(&p.split.test)?;
        art.write(
            &format!("forecasts/{}.csv", kind.id()),
            &forecast_csv(&p.dataset, &p.split.test, &f.values)?,
        )?;
        art.note(&format!("clipped_{}", kind.id()), f.clipped);
        forecasts.push((kind, f.values));
    }
    write_evaluation(&mut art, loaded, &p.split.test, &forecasts)?;
    art.note("train_pairs", p.split.train.len());
    art.finish(loaded, "compare", None)
}
