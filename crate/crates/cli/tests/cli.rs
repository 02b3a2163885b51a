use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn advdetect(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advdetect"))
        .current_dir(dir)
        .args(["--workers", "2"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = advdetect(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    advdetect(dir, args).status.code().expect("exited normally")
}

const DESK: [&str; 8] = ["--train-count", "600", "--val-count", "100", "--test-count", "100", "--epochs", "4"];
const DATASET: [&str; 4] = ["--count", "30", "--pool-size", "90"];

/// Desk model, dataset and difference features in `dir`.
fn pipeline(dir: &Path) {
    ok(dir, &[&DESK[..], &["train-desk-model"]].concat());
    ok(dir, &[&DATASET[..], &["build-dataset"]].concat());
    ok(dir, &["extract-features"]);
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn seeded_runs_are_bitwise_identical_and_restartable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for file in ["desk.addm", "dataset/manifest.jsonl", "dataset/features-diff-all.csv", "dataset/traces.jsonl"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file} differs");
    }

    let dir = a.path();
    let features = dir.join("dataset/features-diff-all.csv");
    let before = fs::metadata(&features).unwrap().modified().unwrap();
    assert!(ok(dir, &["extract-features"]).contains("up to date"));
    assert!(ok(dir, &[&DATASET[..], &["build-dataset"]].concat()).contains("up to date"));
    assert_eq!(fs::metadata(&features).unwrap().modified().unwrap(), before);
    assert!(!ok(dir, &["extract-features", "--force"]).contains("up to date"));
    assert_eq!(fs::read(&features).unwrap(), fs::read(b.path().join("dataset/features-diff-all.csv")).unwrap());
    // a different seed changes the dataset, so the stamp no longer matches
    assert!(!ok(dir, &[&DATASET[..], &["build-dataset", "--seed", "1"]].concat()).contains("up to date"));
}

#[test]
fn stages_write_reports_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    for det in ["lda", "svm", "mlp", "forest"] {
        ok(dir, &["train-detector", "--detector", det]);
        ok(dir, &["evaluate-detector", "--detector", det, "--split", "all"]);
    }
    ok(dir, &["correct"]);
    ok(dir, &["measure-effects", "--extra-jpeg", "20"]);
    let summary = ok(dir, &["report"]);
    assert!(summary.contains("detection accuracy"));
    assert!(summary.contains("label correction"));
    for name in ["desk-training", "dataset", "effects", "correction", "eval-forest-diff-all-all"] {
        for ext in ["json", "txt", "csv"] {
            assert!(dir.join(format!("reports/{name}.{ext}")).exists(), "{name}.{ext} missing");
        }
    }
    let effects = fs::read_to_string(dir.join("reports/effects.csv")).unwrap();
    assert!(effects.lines().next().unwrap().ends_with("jpeg-20"));
    let correction = fs::read_to_string(dir.join("reports/correction.csv")).unwrap();
    assert_eq!(correction.lines().count(), 7, "header plus six subsets");

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("reports/dataset.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["seeds"]["split"], 7);
    assert_eq!(json["provenance"]["tool_version"], format!("advdetect {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn normal_only_manifest_has_clean_original_column() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &[&DESK[..], &["train-desk-model"]].concat());
    ok(dir, &["build-dataset", "--count", "20", "--pool-size", "60", "--attacks", ""]);
    ok(dir, &["measure-effects"]);
    let csv = fs::read_to_string(dir.join("reports/effects.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let original = header.iter().position(|h| *h == "Original").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "normal");
    assert_eq!(rows[0][original], "0");
}

#[test]
fn golden_detector_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let features = fixture("golden-features.csv");
    let args = ["--feature", "count", "--subset", "jpeg", "--detector", "lda", "--features", features.to_str().unwrap()];
    ok(dir, &[&args[..], &["--detector-file", "lda.addt", "train-detector"]].concat());
    ok(dir, &[&args[..], &["--detector-file", "lda.addt", "--split", "all", "evaluate-detector"]].concat());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("reports/eval-lda-count-jpeg-all.json")).unwrap()).unwrap();
    let golden: serde_json::Value = serde_json::from_str(&fs::read_to_string(fixture("golden-eval.json")).unwrap()).unwrap();
    assert_eq!(report["body"], golden);
}

#[test]
fn config_file_fills_unset_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let features = fixture("golden-features.csv");
    fs::write(
        dir.join("run.toml"),
        format!(
            "feature = \"count\"\nsubset = \"blur\"\ndetector = \"svm\"\nfeatures = \"{}\"\ndetector-file = \"d.addt\"\n",
            features.display()
        ),
    )
    .unwrap();
    // the file says blur, which does not match the fixture
    assert_eq!(code(dir, &["--config", "run.toml", "train-detector"]), 3);
    ok(dir, &["--config", "run.toml", "--subset", "jpeg", "train-detector"]);
    assert!(dir.join("d.addt").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(dir, &["extract-features"]), 2, "missing manifest");
    assert_eq!(code(dir, &["--model", "none.addm", "build-dataset"]), 2, "missing model");
    assert_eq!(code(dir, &["--config", "none.toml", "codec-info"]), 2, "missing config");
    assert_eq!(code(dir, &["report"]), 2, "no reports");
    assert_eq!(code(dir, &["--no-such-flag", "codec-info"]), 3);
    assert_eq!(code(dir, &["no-such-command"]), 3);
    assert_eq!(code(dir, &["--backend", "grpc", "build-dataset"]), 3);
    assert_eq!(code(dir, &["--backend", "exec:/bin/false", "build-dataset"]), 4);
    assert_eq!(code(dir, &["--backend", "exec:/no/such/program", "build-dataset"]), 2);
    fs::write(dir.join("bad.toml"), "workers = \"many\"\n").unwrap();
    assert_eq!(code(dir, &["--config", "bad.toml", "codec-info"]), 3);
    assert_eq!(code(dir, &["codec-info"]), 0);
}

#[test]
fn report_refuses_mixed_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let features = fixture("golden-features.csv");
    let args = ["--feature", "count", "--subset", "jpeg", "--features", features.to_str().unwrap(), "--detector-file", "d.addt"];
    ok(dir, &[&args[..], &["train-detector"]].concat());
    ok(dir, &[&args[..], &["--split", "all", "evaluate-detector"]].concat());
    ok(dir, &[&args[..], &["--split", "eval", "evaluate-detector"]].concat());
    ok(dir, &["report"]);
    let path = dir.join("reports/eval-lda-count-jpeg-eval.json");
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    json["provenance"]["tool_version"] = "advdetect 0.0.0".into();
    fs::write(&path, json.to_string()).unwrap();
    let out = advdetect(dir, &["report"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0.0.0"));
}
