use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
output_dir = "out"

[data]
path = "out/synth/load.csv"
split_day = 30

[seeds]
synth = 5
lstm = 1
gru = 2
fastec = 3

[synth]
n_days = 45

[models.lstm]
epochs = 3

[models.gru]
epochs = 3

[models.fastec]
n_components = 2
lambda_grid_size = 3
bootstrap_factor = 2
folds = 3

[models.arx]
lags = 8
"#;

fn stlf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlf"))
        .args(args)
        .env_remove("STLF_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn setup(body: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, body).unwrap();
    (dir, cfg)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = stlf(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_config_names_the_path() {
    let out = stlf(&["ingest", "--config", "/nowhere/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = record(&out);
    assert_eq!(rec["class"], "config");
    assert!(rec["errors"][0].as_str().unwrap().contains("/nowhere/run.toml"));
}

#[test]
fn validation_lists_every_problem() {
    let (_dir, cfg) = setup("output_dir = \"out\"\n[seeds]\nsynth = 1\n[data]\npath = \"absent.csv\"\n");
    let out = stlf(&["ingest", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let errors = record(&out)["errors"].as_array().unwrap().clone();
    assert_eq!(errors.len(), 3, "{errors:?}");
}

#[test]
fn forecasting_before_training_is_a_data_error() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    ok(&stlf(&["synth", "-c", c]));
    let out = stlf(&["forecast", "gru", "-c", c]);
    assert_eq!(out.status.code(), Some(3));
    assert!(record(&out)["errors"][0].as_str().unwrap().contains("stlf train gru"));
    assert!(!dir.path().join("out/forecast/gru/manifest.json").exists());
}

#[test]
fn step_by_step_pipeline() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    ok(&stlf(&["synth", "-c", c]));
    assert!(out.join("synth/labels.csv").is_file());
    ok(&stlf(&["ingest", "-c", c]));
    let m = manifest(&out.join("ingest"));
    assert_eq!(m["notes"]["days"], 44);
    assert_eq!(m["notes"]["train_pairs"], 28);
    assert_eq!(m["notes"]["test_pairs"], 12);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);

    ok(&stlf(&["diagnose", "-c", c]));
    let table = std::fs::read_to_string(out.join("diagnose/stationarity.txt")).unwrap();
    assert!(table.contains("ADF") && table.contains("KPSS"));
    assert!(std::fs::read_to_string(out.join("diagnose/acf.svg")).unwrap().contains("<!-- data"));

    for model in ["lstm", "gru", "fastec", "arx"] {
        ok(&stlf(&["train", model, "-c", c]));
        ok(&stlf(&["forecast", model, "-c", c]));
    }
    ok(&stlf(&["forecast", "naive", "-c", c]));
    let csv = std::fs::read_to_string(out.join("forecast/lstm/forecast.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12 * 192);

    ok(&stlf(&["evaluate", "-c", c]));
    let metrics = std::fs::read_to_string(out.join("evaluate/metrics.txt")).unwrap();
    let rows: Vec<&str> = metrics.lines().map(|l| l.split_whitespace().next().unwrap_or("")).collect();
    assert_eq!(&rows[..7], ["Measure", "MAPE", "MASE", "nRMSE", "niqRMSE", "nmRMSE", "D-M‡"]);
    for model in ["lstm", "gru", "fastec", "arx", "naive"] {
        assert!(out.join(format!("evaluate/qq_{model}.svg")).is_file());
    }
    let m = manifest(&out.join("evaluate"));
    let listed: Vec<&str> = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap())
        .collect();
    assert!(listed.contains(&"metrics.csv") && listed.contains(&"overlay.svg"));
}

#[test]
fn compare_is_deterministic_and_matches_step_by_step() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    ok(&stlf(&["synth", "-c", c]));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&stlf(&["compare", "-c", c, "--output-dir", a.to_str().unwrap()]));
    ok(&stlf(&["compare", "-c", c, "--output-dir", b.to_str().unwrap()]));
    for model in ["lstm", "gru", "fastec", "arx", "naive"] {
        let f = format!("compare/forecasts/{model}.csv");
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{model}");
    }
    assert_eq!(
        std::fs::read(a.join("compare/metrics.csv")).unwrap(),
        std::fs::read(b.join("compare/metrics.csv")).unwrap()
    );

    ok(&stlf(&["train", "arx", "-c", c, "--output-dir", a.to_str().unwrap()]));
    ok(&stlf(&["forecast", "arx", "-c", c, "--output-dir", a.to_str().unwrap()]));
    assert_eq!(
        std::fs::read(a.join("forecast/arx/forecast.csv")).unwrap(),
        std::fs::read(a.join("compare/forecasts/arx.csv")).unwrap()
    );
}

#[test]
fn overrides_reach_the_models() {
    let (dir, cfg) = setup(SMALL);
    let c = cfg.to_str().unwrap();
    ok(&stlf(&["synth", "-c", c]));
    ok(&stlf(&["train", "lstm", "-c", c, "--set", "models.lstm.epochs=2"]));
    let loss = std::fs::read_to_string(dir.path().join("out/train/lstm/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let m = manifest(&dir.path().join("out/train/lstm"));
    assert!(m["config"].as_str().unwrap().contains("epochs = 2"));
}

#[test]
fn output_root_from_environment() {
    let (dir, cfg) = setup(SMALL);
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_stlf"))
        .args(["synth", "-c", cfg.to_str().unwrap()])
        .env("STLF_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("out/synth/manifest.json").is_file());
    assert!(!dir.path().join("out").exists());
}
