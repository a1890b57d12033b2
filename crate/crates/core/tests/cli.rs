use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use equiscale::cli::config::sha256_hex;
use equiscale::neural::train::read_metrics_csv;
use equiscale::scaling::{fit_power_law, read_results_csv, ScalingPoint};

/// Tiny model and data so each command finishes in about a second.
const SMALL: &[&str] = &[
    "--set", "dataset.train_lines=8",
    "--set", "dataset.test_lines=4",
    "--set", "model.d_model=16",
    "--set", "model.d_ff=32",
    "--set", "model.n_heads=2",
    "--set", "model.n_layers_enc=1",
    "--set", "model.n_layers_dec=1",
    "--set", "train.batch_size=4",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equiscale"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("EQUISCALE_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn corpus_normalizes_every_line() {
    let dir = tempfile::tempdir().unwrap();
    let raw: String = (0..4096)
        .map(|i| format!("Line {i}: Hello, World! Ünïcode & digits 42\n"))
        .collect();
    let input = dir.path().join("raw.txt");
    fs::write(&input, raw).unwrap();
    let output = dir.path().join("norm.txt");
    ok(dir.path(), &["corpus", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()]);
    let text = fs::read_to_string(&output).unwrap();
    assert_eq!(text.lines().count(), 4096);
    assert_eq!(text.lines().next().unwrap(), "line hello world n code digits");
    assert!(dir.path().join("corpus/run.json").exists());
}

#[test]
fn synthetic_corpus_is_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = ok(a.path(), &["--seed", "7", "corpus", "--lines", "4096"]);
    let out_b = ok(b.path(), &["--seed", "7", "corpus", "--lines", "4096"]);
    let bytes_a = fs::read(a.path().join("corpus/corpus.txt")).unwrap();
    let bytes_b = fs::read(b.path().join("corpus/corpus.txt")).unwrap();
    assert_eq!(sha256_hex(&bytes_a), sha256_hex(&bytes_b));
    assert!(out_a.contains(&sha256_hex(&bytes_a)));
    assert_eq!(out_a, out_b.replace(b.path().to_str().unwrap(), a.path().to_str().unwrap()));
}

#[test]
fn empty_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.txt");
    fs::write(&input, "").unwrap();
    let out = run(dir.path(), &["corpus", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty corpus"));
}

#[test]
fn bad_configuration_exits_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--set", "model.bogus=1", "dataset"],
        vec!["--set", "train.lr=-1", "train"],
        vec!["train", "--no-such-flag"],
    ] {
        assert_eq!(run(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn dataset_files_rebuild_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &refs(&small(&["dataset"])));
    ok(b.path(), &refs(&small(&["dataset"])));
    for name in ["train.jsonl", "test.jsonl"] {
        let x = fs::read(a.path().join("dataset").join(name)).unwrap();
        let y = fs::read(b.path().join("dataset").join(name)).unwrap();
        assert_eq!(sha256_hex(&x), sha256_hex(&y));
    }
}

#[test]
fn one_epoch_train_then_resume_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &refs(&small(&["train", "--epochs", "1"])));
    let metrics = dir.path().join("train/metrics.csv");
    let rows = read_metrics_csv(fs::File::open(&metrics).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(dir.path().join("train/checkpoints/last.ckpt").exists());
    assert!(dir.path().join("train/checkpoints/best.ckpt").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("train/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);

    ok(dir.path(), &refs(&small(&["train", "--epochs", "2", "--resume"])));
    let resumed = read_metrics_csv(fs::File::open(&metrics).unwrap()).unwrap();
    let straight = tempfile::tempdir().unwrap();
    ok(straight.path(), &refs(&small(&["train", "--epochs", "2"])));
    let fresh =
        read_metrics_csv(fs::File::open(straight.path().join("train/metrics.csv")).unwrap()).unwrap();
    let losses = |r: &[equiscale::neural::TrainRecord]| {
        r.iter().map(|x| (x.epoch, x.train_loss, x.test_loss)).collect::<Vec<_>>()
    };
    assert_eq!(losses(&resumed), losses(&fresh));

    let out = ok(dir.path(), &refs(&small(&["--set", "eval.n_probes=5", "eval"])));
    assert!(out.contains("equivariance_residual"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("eval/scale.json")).unwrap()).unwrap();
    assert!((report["mean_ce"].as_f64().unwrap() - fresh[1].test_loss).abs() < 1e-6);
}

#[test]
fn frequency_baseline_reports_symbol_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &refs(&small(&["baseline", "--solver", "frequency"])));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("baseline/frequency.json")).unwrap()).unwrap();
    let acc = report["symbol_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["examples"].as_array().unwrap().len(), 4);
    assert!(report["examples"][0]["decode_map"].is_array());
}

#[test]
fn sweep_over_the_dataset_grid_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let args = small(&[
        "--set", "dataset.train_lines=2",
        "--set", "train.epochs=1",
        "sweep", "--axis", "dataset", "--values", "1,8,16",
    ]);
    ok(dir.path(), &refs(&args));
    let csv = dir.path().join("sweep/results.csv");
    let rows = read_results_csv(fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(dir.path().join("sweep/manifest.json").exists());
    assert!(dir.path().join("sweep/fit.json").exists());

    let svg_a = dir.path().join("a.svg");
    let svg_b = dir.path().join("b.svg");
    for out in [&svg_a, &svg_b] {
        ok(dir.path(), &["plot", "--input", csv.to_str().unwrap(), "--kind", "loglog", "--output", out.to_str().unwrap()]);
    }
    let svg = fs::read_to_string(&svg_a).unwrap();
    assert_eq!(fs::read(&svg_a).unwrap(), fs::read(&svg_b).unwrap());
    let points: Vec<ScalingPoint> = rows.iter().map(ScalingPoint::from).collect();
    let fit = fit_power_law(&points).unwrap();
    assert!(svg.contains(&format!("slope {:.3}", fit.b)));
    assert_eq!(svg.matches("class=\"fit\"").count(), 1);
}

#[test]
fn loss_curve_has_a_point_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("metrics.csv");
    let mut text = String::from("epoch,train_loss,test_loss,wall_time_s\n");
    for e in 1..=30 {
        text.push_str(&format!("{e},{},{},{}\n", 3.3 - 0.03 * e as f64, 3.3 - 0.02 * e as f64, e));
    }
    fs::write(&csv, text).unwrap();
    ok(dir.path(), &["plot", "--input", csv.to_str().unwrap(), "--kind", "loss_curve"]);
    let svg = fs::read_to_string(dir.path().join("metrics.svg")).unwrap();
    assert_eq!(svg.matches("class=\"point\"").count(), 30);
}
