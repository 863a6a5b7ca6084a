use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use normalnorm::data::{write_csv, Dataset};
use normalnorm::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normalnorm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// CSV with a Gaussian, an exponential, a reflected exponential and a
/// constant column.
fn fixture(dir: &Path, n: usize) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (normal, exp) = (Normal::new(3.0, 2.0).unwrap(), Exp::new(1.0).unwrap());
    let mut data = Vec::new();
    for _ in 0..n {
        data.push(normal.sample(&mut rng));
        data.push(exp.sample(&mut rng));
        data.push(-exp.sample(&mut rng));
        data.push(7.0);
    }
    let d = Dataset::new(Tensor::new(vec![n, 4], data).unwrap(), vec![0; n], 1).unwrap();
    let path = dir.join("fixture.csv");
    let names: Vec<String> = ["gauss", "expo", "neg_expo", "flat"].iter().map(|s| s.to_string()).collect();
    write_csv(&path, &d, &names, false).unwrap();
    path
}

fn read_columns(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let c = normalnorm::data::read_csv(path).unwrap();
    let cols = (0..c.dataset.dim()).map(|j| (0..c.dataset.len()).map(|i| c.dataset.row(i)[j]).collect()).collect();
    (c.names, cols)
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| (x - m) / sd).collect()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["fit-lambda"]), 2);
    assert_eq!(code(&["train", "--epochs", "many"]), 2);
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["train", "--out", s(dir.path()), "--norm", "batchnorm"]), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_normalnorm"))
        .args(["bench", "--sizes", "16"])
        .env("NORMALNORM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_and_numerical_errors() {
    let dir = TempDir::new().unwrap();
    let csv = fixture(dir.path(), 200);
    assert_eq!(code(&["fit-lambda", "--input", "/nonexistent/file.csv"]), 3);
    assert_eq!(code(&["fit-lambda", "--input", s(&csv), "--columns", "nope"]), 3);
    let out = run(&["fit-lambda", "--input", s(&csv), "--columns", "flat"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn fit_lambda_reports_estimates_and_oracle() {
    let dir = TempDir::new().unwrap();
    let csv = fixture(dir.path(), 4096);
    let out_dir = dir.path().join("fit");
    ok(&["fit-lambda", "--input", s(&csv), "--columns", "gauss,expo,neg_expo", "--oracle", "--out", s(&out_dir)]);
    let report = json(&out_dir.join("fit_lambda.json"));
    let col = |k: usize| &report[k];
    assert!((col(0)["lambda_hat"].as_f64().unwrap() - 1.0).abs() < 0.1);
    let (lam, oracle) = (col(1)["lambda_hat"].as_f64().unwrap(), col(1)["oracle_lambda"].as_f64().unwrap());
    assert!(lam < 1.0 && oracle < 1.0, "{lam} {oracle}");
    assert!(col(2)["lambda_hat"].as_f64().unwrap() > 1.0);
    for k in 0..3 {
        let r = col(k);
        assert!(r["nll_at_lambda_hat"].as_f64().unwrap() <= r["nll_at_1"].as_f64().unwrap());
        assert!(r["d2"].as_f64().unwrap() > 0.0);
    }
    let cfg = json(&out_dir.join("fit_lambda_config.json"));
    assert_eq!(cfg["oracle"], true);
    assert_eq!(cfg["alpha"], serde_json::json!([1.0]));
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let csv = fixture(dir.path(), 300);
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, format!(r#"{{"alpha": 0.5, "input": "{}", "columns": ["expo"]}}"#, s(&csv))).unwrap();
    let out_dir = dir.path().join("o");
    ok(&["fit-lambda", "--config", s(&cfg_path), "--alpha", "0", "--out", s(&out_dir)]);
    let report = json(&out_dir.join("fit_lambda.json"));
    assert_eq!(report.as_array().unwrap().len(), 1);
    assert_eq!(report[0]["lambda_hat"].as_f64().unwrap(), 1.0);
    let resolved = json(&out_dir.join("fit_lambda_config.json"));
    assert_eq!(resolved["alpha"], serde_json::json!([0.0]));
    assert_eq!(resolved["columns"], serde_json::json!(["expo"]));

    // Without the flag the file's value applies.
    ok(&["fit-lambda", "--config", s(&cfg_path), "--out", s(&out_dir)]);
    let half = json(&out_dir.join("fit_lambda.json"))[0]["lambda_hat"].as_f64().unwrap();
    assert!(half < 1.0 && half > 0.0);

    fs::write(&cfg_path, r#"{"alpah": 0.5}"#).unwrap();
    assert_eq!(code(&["fit-lambda", "--config", s(&cfg_path)]), 2);
}

#[test]
fn gaussianize_round_trip_and_identity() {
    let dir = TempDir::new().unwrap();
    let csv = fixture(dir.path(), 1000);
    let cols = "gauss,expo,neg_expo";
    let fwd = dir.path().join("fwd.csv");
    let out = ok(&["gaussianize", "--input", s(&csv), "--output", s(&fwd), "--columns", cols]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in 1..3 {
        let before = report[k]["qq_before"]["r2"].as_f64().unwrap();
        let after = report[k]["qq_after"]["r2"].as_f64().unwrap();
        assert!(after > before, "{k}: {before} -> {after}");
    }
    assert!(fwd.with_extension("csv.params.json").exists());

    let back = dir.path().join("back.csv");
    ok(&["gaussianize", "--inverse", "--input", s(&fwd), "--output", s(&back)]);
    let (_, orig) = read_columns(&csv);
    let (names, restored) = read_columns(&back);
    assert_eq!(names, vec!["gauss", "expo", "neg_expo", "flat"]);
    for j in 0..3 {
        let want = standardize(&orig[j]);
        for (a, b) in restored[j].iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "column {j}: {a} vs {b}");
        }
    }
    // Unselected columns pass through untouched.
    assert!(restored[3].iter().all(|&v| v == 7.0));

    let ident = dir.path().join("ident.csv");
    ok(&["gaussianize", "--input", s(&csv), "--output", s(&ident), "--columns", cols, "--alpha", "0"]);
    let (_, id) = read_columns(&ident);
    for j in 0..3 {
        for (a, b) in id[j].iter().zip(standardize(&orig[j])) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn second_gaussianize_pass_moves_lambda_towards_one() {
    let dir = TempDir::new().unwrap();
    let csv = fixture(dir.path(), 2000);
    let (p1, p2) = (dir.path().join("p1.csv"), dir.path().join("p2.csv"));
    let cols = "expo,neg_expo";
    ok(&["gaussianize", "--input", s(&csv), "--output", s(&p1), "--columns", cols]);
    ok(&["gaussianize", "--input", s(&p1), "--output", s(&p2), "--columns", cols]);
    let (a, b) = (json(&dir.path().join("p1.csv.params.json")), json(&dir.path().join("p2.csv.params.json")));
    for k in 0..2 {
        let l1 = a["columns"][k]["lambda"].as_f64().unwrap();
        let l2 = b["columns"][k]["lambda"].as_f64().unwrap();
        assert!((l2 - 1.0).abs() <= (l1 - 1.0).abs(), "{l1} -> {l2}");
    }
}

const TINY: &[&str] = &["--data", "synth:skewed-features:600", "--val-split", "100", "--epochs", "2", "--batch-size", "32"];

fn train_in(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out", s(dir)];
    args.extend_from_slice(TINY);
    if !extra.contains(&"--hidden") {
        args.extend_from_slice(&["--hidden", "8,8"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn training_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_in(&a, &["--seed", "3"]);
    train_in(&b, &["--seed", "3"]);
    for f in ["train_log.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cfg = json(&a.join("train_config.json"));
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["norm"], "normality");
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,train_loss,train_acc,val_loss,val_acc\n"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn identity_normality_reproduces_conventional_logs() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("n"), dir.path().join("c"));
    train_in(&a, &["--norm", "normality", "--alpha", "0", "--xi", "0"]);
    train_in(&b, &["--norm", "conventional"]);
    assert_eq!(fs::read(a.join("train_log.csv")).unwrap(), fs::read(b.join("train_log.csv")).unwrap());
}

#[test]
fn alpha_sweep_writes_one_log_per_value() {
    let dir = TempDir::new().unwrap();
    train_in(dir.path(), &["--alpha", "0,0.25,0.5,1"]);
    for a in ["0", "0.25", "0.5", "1"] {
        assert!(dir.path().join(format!("alpha_{a}/train_log.csv")).exists(), "alpha {a}");
    }
    assert_eq!(json(&dir.path().join("train_summary.json")).as_array().unwrap().len(), 4);
}

#[test]
fn diagnose_defaults_and_errors() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("m");
    train_in(&model, &[]);
    let ck = model.join("checkpoint.bin");
    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    for d in [&d1, &d2] {
        ok(&["diagnose", "--checkpoint", s(&ck), "--data", "synth:skewed-features:2000", "--seed", "1", "--out", s(d)]);
    }
    let cfg = json(&d1.join("diagnose_config.json"));
    assert_eq!((cfg["channels"].as_u64(), cfg["batches"].as_u64()), (Some(20), Some(10)));
    assert_eq!(fs::read(d1.join("diagnostics.json")).unwrap(), fs::read(d2.join("diagnostics.json")).unwrap());
    let csv = fs::read_to_string(d1.join("diagnostics.csv")).unwrap();
    assert!(csv.starts_with("layer,channel,batch,metric,value\n"));
    let report = json(&d1.join("diagnostics.json"));
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);

    let out = run(&["diagnose", "--checkpoint", s(&dir.path().join("missing.bin")), "--data", "synth:blobs:100"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("missing.bin"), "{err}");
    assert_eq!(code(&["diagnose", "--data", "synth:blobs:100"]), 2);
}

#[test]
fn robustness_with_zero_noise_is_all_zero() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("m");
    train_in(&model, &["--hidden", "8,8,8"]);
    let ck = model.join("checkpoint.bin");
    let out = dir.path().join("r");
    ok(&["robustness", "--checkpoint", s(&ck), "--data", "synth:skewed-features:300", "--delta", "0", "--out", s(&out)]);
    let entries = json(&out.join("robustness.json"))["entries"].as_array().unwrap().clone();
    // Injection at layers 0 and 1, probes at every later layer.
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().all(|e| e["mean_zeta"] == 0.0));

    ok(&["robustness", "--checkpoint", s(&ck), "--data", "synth:skewed-features:300", "--out", s(&out)]);
    let cfg = json(&out.join("robustness_config.json"));
    assert_eq!((cfg["delta"].as_f64(), cfg["draws"].as_u64()), (Some(0.5), Some(6)));
    let entries = json(&out.join("robustness.json"))["entries"].as_array().unwrap().clone();
    assert!(entries.iter().all(|e| e["mean_zeta"].as_f64().unwrap() > 0.0 && e["draws"] == 6));
}

#[test]
fn bench_schema_is_stable() {
    let dir = TempDir::new().unwrap();
    let out = ok(&["bench", "--sizes", "64,256", "--width", "8", "--repeats", "2", "--out", s(dir.path())]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,channels,repeats,normality_s,conventional_s,ratio");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("64,8,2,") && lines[2].starts_with("256,8,2,"));
    assert_eq!(fs::read_to_string(dir.path().join("bench.csv")).unwrap(), text);
    assert_eq!(code(&["bench", "--sizes", "1"]), 2);
}
