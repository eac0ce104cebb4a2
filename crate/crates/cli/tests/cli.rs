//! End-to-end runs of the `nnme` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nnme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnme")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_csv(path);
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name} in {}", path.display()));
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

/// Small networks so the training tests stay quick.
const TINY_TRAIN: &str = r#""train": {"k": 5, "epochs": 20, "pretrain_epochs": 10,
    "decoder": {"hidden": [16, 16]}, "encoder": {"hidden": [8, 8]}}"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_the_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = nnme(&["simulate", "--scenario", "exp1-sin", "--n", "2000", "--sigma0", "0.1", "--sigma", "0.1", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["data.csv", "truth.csv", "grid.csv", "manifest.json", "scenario.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let (header, rows) = read_csv(&out.join("data.csv"));
    assert_eq!(header, ["w1", "y"]);
    assert_eq!(rows.len(), 2000);
    assert_eq!(read_csv(&out.join("truth.csv")).1.len(), 2000);
    // seventeen significant digits
    assert!(rows[0][0].split('e').next().unwrap().trim_start_matches('-').len() == 18, "{}", rows[0][0]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["scenario"], "exp1-sin");
    // no staging directory left behind
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let args = ["simulate", "--scenario", "ex1-berry", "--n", "300", "--seed", "11", "--out", out.to_str().unwrap()];
    assert_eq!(code(&nnme(&args)), 0);
    let first: Vec<Vec<u8>> = ["data.csv", "truth.csv", "grid.csv", "manifest.json"].iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(code(&nnme(&args)), 0);
    let second: Vec<Vec<u8>> = ["data.csv", "truth.csv", "grid.csv", "manifest.json"].iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(first, second);
    let other = dir.path().join("other");
    assert_eq!(code(&nnme(&["simulate", "--scenario", "ex1-berry", "--n", "300", "--seed", "12", "--out", other.to_str().unwrap()])), 0);
    assert_ne!(fs::read(other.join("data.csv")).unwrap(), first[0]);
}

#[test]
fn invalid_requests_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    let o = nnme(&["simulate", "--scenario", "exp1-sin", "--n", "0", "--out", out]);
    assert_eq!(code(&o), 2);
    let o = nnme(&["simulate", "--scenario", "no-such-thing", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown scenario"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), r#"{"scenario": "exp1-sin", "epochz": 3}"#);
    let o = nnme(&["simulate", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), r#"{"scenario": "exp1-sin", "train": {"epochz": 3}}"#);
    assert_eq!(code(&nnme(&["fit", "--config", &cfg, "--method", "nn", "--out", out])), 2);
    assert_eq!(code(&nnme(&["fit", "--scenario", "exp1-sin", "--method", "svm", "--out", out])), 2);
    assert!(!Path::new(out).exists());
}

#[test]
fn missing_input_file_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = nnme(&["fit", "--data", dir.path().join("absent.csv").to_str().unwrap(), "--sigma0", "0.1", "--out", dir.path().join("f").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = nnme(&["simulate", "--config", dir.path().join("absent.json").to_str().unwrap(), "--out", dir.path().join("f").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn kale_without_error_matches_kile() {
    let dir = tempfile::tempdir().unwrap();
    let grids: Vec<Vec<f64>> = ["kile", "kale"]
        .iter()
        .map(|m| {
            let out = dir.path().join(m);
            let o = nnme(&["fit", "--scenario", "exp1-sin", "--n", "150", "--sigma0", "0", "--seed", "3", "--method", m, "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            column(&out.join("predictions.csv"), "estimate")
        })
        .collect();
    let diff = grids[0].iter().zip(&grids[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6, "max difference {diff}");
}

#[test]
fn nn_fit_on_noiseless_linear_data_is_nearly_linear() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("linear.csv");
    let mut text = String::from("w1,y\n");
    for i in 0..200 {
        let w = -1.0 + 2.0 * i as f64 / 199.0;
        text.push_str(&format!("{w},{}\n", 1.0 + 2.0 * w));
    }
    fs::write(&data, text).unwrap();
    // A relu fit is piecewise linear and keeps kinks of slope change ~1 between
    // samples, which alone is ~1e-2 in a second difference at this grid spacing.
    let cfg = write_config(dir.path(), r#"{"train": {"epochs": 1000, "adam": {"alpha0": 0.005},
        "decoder": {"hidden": [16, 16], "activation": "tanh"}}}"#);
    let out = dir.path().join("fit");
    let o = nnme(&["fit", "--config", &cfg, "--data", data.to_str().unwrap(), "--sigma0", "0", "--method", "nn", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f = column(&out.join("predictions.csv"), "estimate");
    let second = f.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max);
    assert!(second < 1e-2, "max second difference {second}");
    let trace = read_csv(&out.join("trace.csv"));
    assert_eq!(trace.0, ["epoch", "noise", "objective", "rss"]);
    assert!(out.join("fit.json").exists());
}

#[test]
fn fit_then_evaluate_the_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{"scenario": "exp1-sin", "n": 120, "seed": 5, {TINY_TRAIN},
        "evaluate": {{"k_pred": 50, "prediction_reps": 1, "prediction_folds": 2}}}}"#));
    let fit = dir.path().join("fit");
    let o = nnme(&["fit", "--config", &cfg, "--method", "nnme", "--out", fit.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(fit.join("summary.json")).unwrap()).unwrap();
    assert!(summary["ise"].as_f64().unwrap().is_finite());
    let saved: Value = serde_json::from_str(&fs::read_to_string(fit.join("fit.json")).unwrap()).unwrap();
    assert_eq!(saved["neural"]["wall_seconds"], 0.0);

    // rerunning reproduces the fit byte for byte
    let before = fs::read(fit.join("fit.json")).unwrap();
    assert_eq!(code(&nnme(&["fit", "--config", &cfg, "--method", "nnme", "--out", fit.to_str().unwrap()])), 0);
    assert_eq!(fs::read(fit.join("fit.json")).unwrap(), before);

    let ev = dir.path().join("eval");
    let o = nnme(&["evaluate", "--config", &cfg, "--fit", fit.join("fit.json").to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_csv(&ev.join("posterior_mean.csv"));
    assert_eq!(rows.len(), 120);
    assert_eq!(read_csv(&ev.join("prediction_error.csv")).1.len(), 1);
    // scoring the saved fit gives the same ISE as at fit time
    let eval_summary: Value = serde_json::from_str(&fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    assert_eq!(eval_summary["ise"], summary["ise"]);
    let o = nnme(&["evaluate", "--config", &cfg, "--method", "kile", "--fit", fit.join("fit.json").to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn cv_with_one_candidate_echoes_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{"scenario": "exp1-sin", "n": 100, {TINY_TRAIN},
        "cv": {{"grid": [{{"k": 4}}], "folds": 5}}}}"#));
    let out = dir.path().join("cv");
    let o = nnme(&["cv", "--config", &cfg, "--method", "nnme", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("losses.csv"));
    assert_eq!(header, ["config", "fold", "rss", "elbo"]);
    assert_eq!(rows.len(), 5);
    let selected: Value = serde_json::from_str(&fs::read_to_string(out.join("selected_config.json")).unwrap()).unwrap();
    assert_eq!(selected["k"], 4);
    assert_eq!(selected["epochs"], 20);
}

#[test]
fn benchmark_tabulates_every_job() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{"n": 100, {TINY_TRAIN}, "benchmark": {{"scenarios": ["exp1-sin"], "methods": ["kile", "nn"], "reps": 3}}}}"#));
    let out = dir.path().join("bench");
    let o = nnme(&["benchmark", "--config", &cfg, "--seed", "9", "--jobs", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("results.csv"));
    assert_eq!(header, ["scenario", "method", "n", "sigma0", "sigma", "rep", "seed", "ise", "status"]);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[8] == "ok"), "{rows:?}");

    let (header, summary) = read_csv(&out.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for s in &summary {
        let ises: Vec<f64> = rows.iter().filter(|r| r[1] == s[1]).map(|r| r[7].parse().unwrap()).collect();
        let mean = ises.iter().sum::<f64>() / 3.0;
        let sd = (ises.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        let got = |name: &str| s[col(name)].parse::<f64>().unwrap();
        assert!((got("mean") - mean).abs() <= 1e-15 * mean.abs().max(1e-300) * 4.0);
        assert!((got("sd") - sd).abs() <= 1e-12 * sd);
        assert!((got("se") - got("sd") / 3f64.sqrt()).abs() <= 1e-15 * got("se") * 4.0);
    }

    // the worker count does not change the table
    let serial = dir.path().join("serial");
    assert_eq!(code(&nnme(&["benchmark", "--config", &cfg, "--seed", "9", "--jobs", "1", "--out", serial.to_str().unwrap()])), 0);
    assert_eq!(fs::read(serial.join("results.csv")).unwrap(), fs::read(out.join("results.csv")).unwrap());
}

#[test]
fn benchmark_records_failed_jobs_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    // the flow prior needs two covariates, so every exp1-sin fit fails while kriging succeeds
    let cfg = write_config(dir.path(), r#"{"n": 60, "train": {"prior": {"kind": "nice", "layers": 2, "hidden": [8]}}, "benchmark": {"scenarios": ["exp1-sin"], "methods": ["nnme", "kile"], "reps": 2}}"#);
    let out = dir.path().join("bench");
    let o = nnme(&["benchmark", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_csv(&out.join("results.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r[8].starts_with("error")).count(), 2, "{rows:?}");
    assert!(rows.iter().filter(|r| r[1] == "kile").all(|r| r[8] == "ok"));
}
