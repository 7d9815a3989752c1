//! End-to-end tests against the compiled binary: flag handling, exit codes,
//! artifact layout, and rerun determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn fedleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedleak"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SMALL_LLL: &str = r#"
schema_version = 1
name = "t"
[dataset]
source = "synthetic"
input = [1, 6, 6]
classes = 4
train_size = 512
test_size = 64
[model]
kind = "tiny_mlp"
hidden = 16
[attack]
kind = "binning"
k = 16
batches = 3
batch_size = 8
calibration_size = 64
[seeds]
master = 3
"#;

#[test]
fn dry_run_touches_nothing_and_exits_zero() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_LLL);
    let out_dir = dir.path().join("out");
    let out = fedleak(&["run", &cfg, "--dry-run", "--output", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{:?}", out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("dry run"), "{}", text);
    assert!(text.contains("attack: binning"), "{}", text);
    assert!(!out_dir.exists(), "dry run created the output dir");
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{}\nbogus_key = 1\n", SMALL_LLL));
    let out = fedleak(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{:?}", out);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_key"), "stderr should name the key: {}", err);
}

#[test]
fn invalid_value_exits_2_with_section_path() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_LLL.replace("k = 16", "k = 1"));
    let out = fedleak(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{:?}", out);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("attack.k"), "{}", err);
}

#[test]
fn missing_dataset_root_is_a_runtime_error() {
    let dir = tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SMALL_LLL
            .replace("source = \"synthetic\"", "source = \"mnist\"")
            .replace("input = [1, 6, 6]", "input = [1, 28, 28]")
            .replace("classes = 4", "classes = 10"),
    );
    let out_dir = dir.path().join("out");
    let out = Command::new(env!("CARGO_BIN_EXE_fedleak"))
        .args(["run", &cfg, "--output", out_dir.to_str().unwrap()])
        .env_remove("FEDLEAK_DATA_DIR")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{:?}", out);
    assert!(out_dir.join("FAILED").exists(), "runtime failures leave a FAILED marker");
}

#[test]
fn lll_run_writes_manifest_reports_and_leaked_blobs() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_LLL);
    let out_dir = dir.path().join("out");
    let out = fedleak(&["run", &cfg, "--output", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{:?}", out);
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("reports/leakage.csv").exists());
    assert!(out_dir.join("leaked/manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["schema_version"], 1);
    assert!(manifest["config_sha256"].as_str().unwrap().len() == 64);
    // config echo allows byte-exact reruns
    assert!(manifest["config"].as_str().unwrap().contains("kind = \"binning\""));
}

#[test]
fn identical_config_and_seed_reproduce_identical_artifacts() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_LLL);
    let out_a = dir.path().join("out");
    let run = |out: &Path| {
        let st = fedleak(&["run", &cfg, "--output", out.to_str().unwrap()]);
        assert!(st.status.success(), "{:?}", st);
    };
    run(&out_a);
    let mut snapshot = Vec::new();
    collect(&out_a, &out_a, &mut snapshot);
    snapshot.sort();
    let first: Vec<(String, Vec<u8>)> = snapshot
        .iter()
        .map(|rel| (rel.clone(), fs::read(out_a.join(rel)).unwrap()))
        .collect();
    fs::remove_dir_all(&out_a).unwrap();
    run(&out_a);
    for (rel, bytes) in &first {
        let again = fs::read(out_a.join(rel)).unwrap();
        assert_eq!(&again, bytes, "{} changed between identical runs", rel);
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for entry in fs::read_dir(dir).unwrap().flatten() {
        let p = entry.path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().display().to_string());
        }
    }
}

#[test]
fn seed_flag_changes_artifacts() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_LLL);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    assert!(fedleak(&["run", &cfg, "--output", out_a.to_str().unwrap()]).status.success());
    assert!(fedleak(&["run", &cfg, "--seed", "99", "--output", out_b.to_str().unwrap()])
        .status
        .success());
    let a = fs::read_to_string(out_a.join("reports/leakage.csv")).unwrap();
    let b = fs::read_to_string(out_b.join("reports/leakage.csv")).unwrap();
    assert_ne!(a, b, "different seeds should attack different batches");
}

#[test]
fn attack_gi_batches_flag_controls_trial_count() {
    let dir = tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
schema_version = 1
[dataset]
source = "synthetic"
input = [1, 4, 4]
classes = 3
train_size = 128
test_size = 32
[model]
kind = "tiny_mlp"
hidden = 8
[attack]
kind = "gi"
batch_sizes = [1]
batches = 7
iterations = 20
restarts = 1
[seeds]
master = 5
"#,
    );
    let out_dir = dir.path().join("out");
    let out = fedleak(&[
        "attack-gi",
        &cfg,
        "--batches",
        "2",
        "--output",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{:?}", out);
    let csv = fs::read_to_string(out_dir.join("reports/gi_sweep.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let trials: usize = row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(trials, 2, "--batches 2 should attack exactly 2 batches: {}", row);
}

#[test]
fn stats_and_report_round_trip() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_LLL);
    let out_dir = dir.path().join("out");
    assert!(fedleak(&["run", &cfg, "--output", out_dir.to_str().unwrap()]).status.success());

    let stats = fedleak(&["stats", out_dir.to_str().unwrap()]);
    assert!(stats.status.success());
    let table = String::from_utf8_lossy(&stats.stdout);
    assert!(table.starts_with("artifact,rows\n"));
    assert!(table.contains("reports/leakage.csv,3"), "{}", table);

    let report = fedleak(&["report", out_dir.to_str().unwrap(), out_dir.to_str().unwrap()]);
    assert!(report.status.success());
    let csv = String::from_utf8_lossy(&report.stdout);
    assert_eq!(csv.lines().count(), 3, "two runs, two data rows: {}", csv);

    // rerunning report reproduces the same bytes
    let again = fedleak(&["report", out_dir.to_str().unwrap(), out_dir.to_str().unwrap()]);
    assert_eq!(report.stdout, again.stdout);
}

#[test]
fn stats_on_empty_dir_prints_header_only() {
    let dir = tempdir().unwrap();
    let out = fedleak(&["stats", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "artifact,rows\n");
}

#[test]
fn fl_baseline_requires_fl_section() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_LLL);
    let out = fedleak(&["fl-baseline", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{:?}", out);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[fl]"), "{}", err);
}
