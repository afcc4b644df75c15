//! The run configuration: one TOML file with nested sections, scalar
//! overrides from the command line, and validation that reports every
//! problem at once.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stlf::baselines::DEFAULT_LAGS;
use stlf::fastec::FastecConfig;
use stlf::neural::{CellKind, TrainConfig};
use stlf::series::{ColumnLayout, DEFAULT_SCHEDULE_LAG, STEPS_PER_DAY};
use stlf::synth::SynthConfig;

use crate::error::{CliError, Result};

/// Overrides relative output directories' root.
pub const OUTPUT_ROOT_ENV: &str = "STLF_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Gru,
    Fastec,
    Arx,
    /// Yesterday's curve repeated; needs no training.
    Naive,
}

impl ModelKind {
    pub const TRAINABLE: [ModelKind; 4] = [ModelKind::Lstm, ModelKind::Gru, ModelKind::Fastec, ModelKind::Arx];

    /// Lower-case identifier used in file names.
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::Fastec => "fastec",
            ModelKind::Arx => "arx",
            ModelKind::Naive => "naive",
        }
    }

    pub fn model_file(self) -> &'static str {
        match self {
            ModelKind::Lstm | ModelKind::Gru => "model.txt",
            _ => "model.json",
        }
    }

    pub fn cell(self) -> Option<CellKind> {
        match self {
            ModelKind::Lstm => Some(CellKind::Lstm),
            ModelKind::Gru => Some(CellKind::Gru),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lstm => "LSTM",
            ModelKind::Gru => "GRU",
            ModelKind::Fastec => "FASTEC",
            ModelKind::Arx => "ARX",
            ModelKind::Naive => "Naive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    pub seeds: Seeds,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Load CSV; relative paths are taken from the config file's directory.
    pub path: Option<PathBuf>,
    pub layout: ColumnLayout,
    /// Recording lag of the schedules, in steps.
    pub schedule_lag: usize,
    /// First test day after the schedule shift; defaults to about seven
    /// months of training data.
    pub split_day: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            layout: ColumnLayout::Grouped,
            schedule_lag: DEFAULT_SCHEDULE_LAG,
            split_day: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub synth: u64,
    pub lstm: u64,
    pub gru: u64,
    pub fastec: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub max_lag: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { max_lag: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArxConfig {
    pub lags: usize,
}

impl Default for ArxConfig {
    fn default() -> Self {
        Self { lags: DEFAULT_LAGS }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub lstm: TrainConfig,
    pub gru: TrainConfig,
    pub fastec: FastecConfig,
    pub arx: ArxConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Columns of the comparison table, in order.
    pub models: Vec<ModelKind>,
    /// Model the DM tests are run against.
    pub reference: ModelKind,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Lstm, ModelKind::Gru, ModelKind::Fastec, ModelKind::Arx, ModelKind::Naive],
            reference: ModelKind::Lstm,
        }
    }
}

impl RunConfig {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seeds.synth,
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self, kind: CellKind) -> TrainConfig {
        match kind {
            CellKind::Lstm => TrainConfig {
                seed: self.seeds.lstm,
                ..self.models.lstm.clone()
            },
            CellKind::Gru => TrainConfig {
                seed: self.seeds.gru,
                ..self.models.gru.clone()
            },
        }
    }

    pub fn fastec_config(&self) -> FastecConfig {
        FastecConfig {
            seed: self.seeds.fastec,
            ..self.models.fastec.clone()
        }
    }

    fn check(&self, needs_data: bool, errors: &mut Vec<String>) {
        match &self.data.path {
            Some(p) if needs_data && !p.is_file() => {
                errors.push(format!("data.path: {} does not exist", p.display()))
            }
            None if needs_data => errors.push("data.path: required by this subcommand".into()),
            _ => {}
        }
        if self.data.schedule_lag >= STEPS_PER_DAY {
            errors.push(format!(
                "data.schedule_lag: {} must be below {STEPS_PER_DAY}",
                self.data.schedule_lag
            ));
        }
        if let Err(e) = self.synth_config().validate() {
            errors.push(format!("synth: {e}"));
        }
        if self.diagnose.max_lag == 0 {
            errors.push("diagnose.max_lag: must be positive".into());
        }
        for (name, c) in [("lstm", &self.models.lstm), ("gru", &self.models.gru)] {
            if !(c.learning_rate > 0.0 && c.learning_rate.is_finite()) {
                errors.push(format!("models.{name}.learning_rate: must be positive"));
            }
            if c.epochs == 0 {
                errors.push(format!("models.{name}.epochs: must be positive"));
            }
            if c.width == 0 {
                errors.push(format!("models.{name}.width: must be positive"));
            }
            if c.batch_size == Some(0) {
                errors.push(format!("models.{name}.batch_size: must be positive"));
            }
            if matches!(c.grad_clip, Some(g) if !(g > 0.0)) {
                errors.push(format!("models.{name}.grad_clip: must be positive"));
            }
        }
        let f = &self.models.fastec;
        if f.taus.is_empty() || f.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            errors.push("models.fastec.taus: levels must lie in (0, 1)".into());
        }
        if f.folds < 2 {
            errors.push("models.fastec.folds: at least two folds are needed".into());
        }
        if f.n_components == 0 {
            errors.push("models.fastec.n_components: must be positive".into());
        }
        if !(f.tol > 0.0) || f.max_iter == 0 {
            errors.push("models.fastec: tol and max_iter must be positive".into());
        }
        if !(f.affiliation_level > 0.0 && f.affiliation_level < 1.0) {
            errors.push("models.fastec.affiliation_level: must lie in (0, 1)".into());
        }
        if self.models.arx.lags == 0 || self.models.arx.lags > STEPS_PER_DAY {
            errors.push(format!("models.arx.lags: must lie in 1..={STEPS_PER_DAY}"));
        }
        let e = &self.evaluate;
        if e.models.is_empty() {
            errors.push("evaluate.models: at least one model is needed".into());
        }
        if e.models.iter().collect::<BTreeSet<_>>().len() != e.models.len() {
            errors.push("evaluate.models: duplicate entries".into());
        }
        if !e.models.contains(&e.reference) {
            errors.push(format!("evaluate.reference: {} is not in evaluate.models", e.reference.id()));
        }
    }
}

/// A validated configuration with its canonical form.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// Canonical TOML of the resolved configuration.
    pub canonical: String,
    /// SHA-256 of `canonical`.
    pub hash: String,
}

impl Loaded {
    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("--set {key}: malformed key"));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| format!("--set {key}: {part} is not a section"))?;
    }
    let last = parts[parts.len() - 1];
    if matches!(node.get(last), Some(toml::Value::Table(_) | toml::Value::Array(_))) {
        return Err(format!("--set {key}: only scalar fields can be overridden"));
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_override(raw: &str) -> std::result::Result<(String, toml::Value), String> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("--set {raw}: expected KEY=VALUE"))?;
    let key = key.trim();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    if matches!(parsed, toml::Value::Table(_) | toml::Value::Array(_)) {
        return Err(format!("--set {key}: only scalar values are accepted"));
    }
    Ok((key.to_string(), parsed))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads, overrides, resolves and validates a configuration.
///
/// Relative paths are taken from the config file's directory, except the
/// output directory, which is taken from `$STLF_OUTPUT_ROOT` when that is
/// set. An explicit `output_dir` argument wins over both.
pub fn load(path: &Path, overrides: &[String], output_dir: Option<&Path>, needs_data: bool) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config file {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;

    let mut errors = Vec::new();
    for raw in overrides {
        match parse_override(raw).and_then(|(k, v)| set_path(&mut table, &k, v)) {
            Ok(()) => {}
            Err(e) => errors.push(e),
        }
    }
    match table.get("seeds").and_then(|s| s.as_table()) {
        None => errors.push("seeds: section is mandatory".into()),
        Some(seeds) => {
            for name in ["synth", "lstm", "gru", "fastec"] {
                match seeds.get(name) {
                    None => errors.push(format!("seeds.{name}: missing")),
                    Some(toml::Value::Integer(v)) if *v >= 0 => {}
                    Some(_) => errors.push(format!("seeds.{name}: must be a non-negative integer")),
                }
            }
        }
    }
    // a section seed is only accepted when it repeats the [seeds] entry, as
    // in the resolved snapshot stored with every manifest
    for (section, name) in [("synth", "synth"), ("models.lstm", "lstm"), ("models.gru", "gru"), ("models.fastec", "fastec")] {
        let mut node = Some(&table);
        for part in section.split('.') {
            node = node.and_then(|t| t.get(part)).and_then(|v| v.as_table());
        }
        let seeds = table.get("seeds").and_then(|s| s.as_table());
        if let Some(seed) = node.and_then(|t| t.get("seed")) {
            if seeds.and_then(|s| s.get(name)) != Some(seed) {
                errors.push(format!("{section}.seed: conflicts with seeds.{name}; set seeds in the [seeds] section"));
            }
        }
    }
    if !table.contains_key("output_dir") && output_dir.is_none() {
        errors.push("output_dir: missing".into());
    }
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    if let Some(dir) = output_dir {
        table.insert("output_dir".into(), toml::Value::String(dir.display().to_string()));
    }

    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.data.path = config.data.path.as_ref().map(|p| resolve(&base, p));
    config.output_dir = match (output_dir, std::env::var_os(OUTPUT_ROOT_ENV)) {
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(root)) if !root.is_empty() => resolve(Path::new(&root), &config.output_dir),
        _ => resolve(&base, &config.output_dir),
    };
    config.synth = config.synth_config();
    config.models.lstm = config.train_config(CellKind::Lstm);
    config.models.gru = config.train_config(CellKind::Gru);
    config.models.fastec = config.fastec_config();
    config.check(needs_data, &mut errors);
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    let canonical = toml::to_string(&config).map_err(|e| CliError::config(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    Ok(Loaded {
        config,
        canonical,
        hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, body).unwrap();
        p
    }

    const SEEDS: &str = "[seeds]\nsynth = 1\nlstm = 2\ngru = 3\nfastec = 4\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("output_dir = \"out\"\n{SEEDS}"));
        let l = load(&p, &[], None, false).unwrap();
        assert_eq!(l.config.output_dir, dir.path().join("out"));
        assert_eq!(l.config.train_config(CellKind::Gru).seed, 3);
        assert_eq!(l.config.fastec_config().seed, 4);
        assert_eq!(l.config.synth_config().seed, 1);
        assert_eq!(l.config.evaluate.reference, ModelKind::Lstm);
        assert_eq!(l.hash.len(), 64);
    }

    #[test]
    fn overrides_change_scalars_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("output_dir = \"out\"\n{SEEDS}"));
        let a = load(&p, &[], None, false).unwrap();
        let b = load(&p, &["models.lstm.epochs=7".into(), "seeds.lstm=9".into()], None, false).unwrap();
        assert_eq!(b.config.models.lstm.epochs, 7);
        assert_eq!(b.config.train_config(CellKind::Lstm).seed, 9);
        assert_ne!(a.hash, b.hash);
        let err = load(&p, &["models=3".into()], None, false).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn errors_are_itemised() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "output_dir = \"out\"\n[seeds]\nsynth = 1\n[models.lstm]\nseed = 5\n");
        match load(&p, &[], None, false).unwrap_err() {
            CliError::Config(items) => {
                assert!(items.iter().any(|m| m.contains("seeds.lstm")));
                assert!(items.iter().any(|m| m.contains("seeds.gru")));
                assert!(items.iter().any(|m| m.contains("models.lstm.seed")));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn semantic_checks() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "output_dir = \"out\"\n{SEEDS}[data]\npath = \"missing.csv\"\nschedule_lag = 96\n[evaluate]\nmodels = [\"gru\"]\n"
        );
        let p = write(dir.path(), &body);
        match load(&p, &[], None, true).unwrap_err() {
            CliError::Config(items) => {
                assert_eq!(items.len(), 3, "{items:?}");
                assert!(items[0].contains("missing.csv"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("output_dir = \"out\"\n{SEEDS}[models.lstm]\nepoch = 3\n"));
        assert!(matches!(load(&p, &[], None, false), Err(CliError::Config(_))));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load(Path::new("/no/such/run.toml"), &[], None, false).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.messages()[0].contains("/no/such/run.toml"));
    }

    #[test]
    fn snapshot_reloads_to_the_same_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &format!("output_dir = \"out\"\n{SEEDS}[models.gru]\nepochs = 3\n"));
        let a = load(&p, &[], None, false).unwrap();
        assert!(a.canonical.contains("seed = 3"));
        let again = dir.path().join("snapshot.toml");
        std::fs::write(&again, &a.canonical).unwrap();
        let b = load(&again, &[], None, false).unwrap();
        assert_eq!(a.hash, b.hash);
    }

    #[test]
    fn explicit_output_dir_wins() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), SEEDS);
        let l = load(&p, &[], Some(Path::new("/tmp/elsewhere")), false).unwrap();
        assert_eq!(l.config.output_dir, PathBuf::from("/tmp/elsewhere"));
    }
}
