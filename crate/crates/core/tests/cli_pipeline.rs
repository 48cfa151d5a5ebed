use std::path::{Path, PathBuf};

use msdcda::cli;
use msdcda::evalkit::Summary;

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn synth(dir: &Path, name: &str, sources: usize, classes: usize) -> PathBuf {
    let out = dir.join(name);
    let code = cli::run([
        "msdcda", "synth", "--sources", &sources.to_string(), "--classes", &classes.to_string(), "--samples", "12",
        "--seed", "3", "--out", &s(&out),
    ]);
    assert_eq!(code, 0);
    out
}

fn summary(dir: &Path) -> Summary {
    serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn synth_then_train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", 3, 3);
    let out = dir.path().join("run");
    let code = cli::run(["msdcda", "train", "--data", &s(&data), "--target", "S3", "--epochs", "2", "--out", &s(&out)]);
    assert_eq!(code, 0);
    for f in ["model.json", "loss_log.csv", "predictions.csv", "metrics.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert!(log.lines().next().unwrap().contains("tau"));
    assert!(log.lines().count() > 2);
    let model = msdcda::model::MsDcdaModel::load(&out.join("model.json")).unwrap();
    // three sources plus the ensemble branch
    assert_eq!(model.n_branches(), 4);
}

#[test]
fn loo_subject_covers_every_subject() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", 3, 3);
    let out = dir.path().join("loo");
    let code = cli::run(["msdcda", "loo-subject", "--data", &s(&data), "--epochs", "1", "--rounds", "2", "--out", &s(&out)]);
    assert_eq!(code, 0);
    let sm = summary(&out);
    assert_eq!(sm.n_folds, 4);
    assert_eq!(sm.rounds, 2);
    assert_eq!(sm.per_fold.len(), 4);
    assert!((0.0..=1.0).contains(&sm.acc_mean));
    assert!(out.join("folds.csv").is_file());
    assert!(out.join("accuracy.dat").is_file());
}

#[test]
fn ablations_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", 2, 3);
    let base = ["--data", &s(&data), "--epochs", "1"];
    let losses = dir.path().join("losses");
    let mut args = vec!["msdcda", "ablate-losses"];
    args.extend(base);
    args.extend(["--out", losses.to_str().unwrap()]);
    assert_eq!(cli::run(&args), 0);
    let table = std::fs::read_to_string(losses.join("ablation_losses.csv")).unwrap();
    for label in ["CE only", "w/o MMD", "w/o DISC", "w/o SCD", "ALL"] {
        assert!(table.contains(label), "{label} row missing");
    }

    let ratio = dir.path().join("ratio");
    let mut args = vec!["msdcda", "ablate-ratio", "--ratios", "1:9,dynamic"];
    args.extend(base);
    args.extend(["--out", ratio.to_str().unwrap()]);
    assert_eq!(cli::run(&args), 0);
    assert!(ratio.join("ablation_ratio.json").is_file());

    let lobes = dir.path().join("lobes");
    let mut args = vec!["msdcda", "ablate-lobes", "--lobes", "F,F+P,all", "--bands", "5"];
    args.extend(base);
    args.extend(["--out", lobes.to_str().unwrap()]);
    assert_eq!(cli::run(&args), 0);
    let table = std::fs::read_to_string(lobes.join("ablation_lobes.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn transfer_merges_four_classes_into_three() {
    let dir = tempfile::tempdir().unwrap();
    let four = synth(dir.path(), "four", 2, 4);
    let three = synth(dir.path(), "three", 2, 3);
    let out = dir.path().join("t");
    let code = cli::run([
        "msdcda", "transfer", "--data", &s(&four), "--test-data", &s(&three), "--epochs", "1", "--out", &s(&out),
    ]);
    assert_eq!(code, 0);
    assert_eq!(summary(&out).n_folds, 3);
}

#[test]
fn extract_reads_raw_csv() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    let rate = 200.0;
    let mut text = String::new();
    for ch in 0..3 {
        let row: Vec<String> = (0..1000)
            .map(|i| format!("{:.6}", ((ch + 2) as f64 * 0.05 * i as f64).sin() + 0.01 * ((i * 31 + ch) % 17) as f64))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&raw, text).unwrap();
    let out = dir.path().join("f.csv");
    let code = cli::run(["msdcda", "extract", "--input", &s(&raw), "--rate", &rate.to_string(), "--label", "1", "--out", &s(&out)]);
    assert_eq!(code, 0);
    let written = std::fs::read_to_string(&out).unwrap();
    // 5 windows of one second plus a header
    assert_eq!(written.lines().count(), 6);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", 2, 3);
    let out = s(&dir.path().join("o"));
    assert_eq!(cli::run(["msdcda", "train", "--data", &s(&data), "--target", "S1", "--lr=-1", "--out", &out]), 2);
    assert_eq!(cli::run(["msdcda", "train", "--data", &s(&data), "--target", "S1", "--kernel", "rbf", "--out", &out]), 2);
    assert_eq!(cli::run(["msdcda", "loo-subject", "--data", &s(&data), "--ratio", "1:x", "--out", &out]), 2);
    assert_eq!(cli::run(["msdcda", "train", "--data", &s(&dir.path().join("missing")), "--target", "S1", "--out", &out]), 3);
    assert_eq!(cli::run(["msdcda", "--help"]), 0);
}
