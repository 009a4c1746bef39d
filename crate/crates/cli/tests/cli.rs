use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmvenc::encoder::{load_checkpoint, ModelParams};

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mmvenc"))
            .args(args)
            .arg("--quiet")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn synth(&self, name: &str, extra: &[&str]) {
        let out = self.arg(name);
        let mut args = vec!["synth", "--samples", "60", "--out", &out];
        args.extend_from_slice(extra);
        self.ok(&args);
    }
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn synth_is_reproducible_and_records_a_manifest() {
    let s = Sandbox::new();
    s.synth("a", &["--seed", "3"]);
    s.synth("b", &["--seed", "3"]);
    s.synth("c", &["--seed", "4"]);
    assert_eq!(data_files(&s.path("a")), data_files(&s.path("b")));
    assert_ne!(data_files(&s.path("a")), data_files(&s.path("c")));
    let m = manifest(&s.path("a"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["n_samples"], 60);
    assert!(m["dataset_fingerprint"].is_string());
}

#[test]
fn negative_voxel_count_is_rejected() {
    let s = Sandbox::new();
    fs::write(s.path("spec.toml"), "voxels_lh = -5\n").unwrap();
    let out = s.run(&["synth", "--spec", &s.arg("spec.toml"), "--out", &s.arg("d")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("voxels_lh"));
    assert!(!s.path("d").exists());
}

#[test]
fn zero_epochs_write_the_initial_parameters() {
    let s = Sandbox::new();
    s.synth("d", &[]);
    s.ok(&["train", "--data", &s.arg("d"), "--epochs", "0", "--seed", "9", "--out", &s.arg("c")]);
    let ck = load_checkpoint(&s.path("c")).unwrap();
    assert_eq!(ck.seed, 9);
    assert_eq!(ck.params, ModelParams::<f32>::init(&ck.config, 9).unwrap());
}

#[test]
fn image_only_training_drops_the_text_span() {
    let s = Sandbox::new();
    s.synth("d", &[]);
    s.ok(&[
        "train", "--data", &s.arg("d"), "--mode", "image-only", "--epochs", "1", "--out", &s.arg("c"),
    ]);
    let m = manifest(&s.path("c"));
    assert_eq!(m["mode"], "image-only");
    assert_eq!(m["seq_len"], 17);
    assert_eq!(m["fold"], 0);
    assert!(m["params_hash"].is_string());
    let trace = fs::read_to_string(s.path("c/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn eval_writes_roi_tables_and_charts() {
    let s = Sandbox::new();
    s.synth("d", &[]);
    s.ok(&["train", "--data", &s.arg("d"), "--epochs", "1", "--out", &s.arg("c")]);
    s.ok(&[
        "eval", "--checkpoint", &s.arg("c"), "--data", &s.arg("d"), "--svg", "--out", &s.arg("e"),
    ]);
    for h in ["lh", "rh"] {
        let csv = fs::read_to_string(s.path(&format!("e/report_{h}.csv"))).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.split(',').nth(1) == Some(h)));
        assert!(rows[7].split(',').nth(2) == Some("all"));
        let svg = fs::read_to_string(s.path(&format!("e/report_{h}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
    }
    assert_eq!(manifest(&s.path("e"))["command"], "eval");
}

#[test]
fn mismatched_checkpoint_dimensions_fail() {
    let s = Sandbox::new();
    s.synth("d", &[]);
    let other = s.arg("wide");
    fs::write(s.path("wide.toml"), "voxels_lh = 30\n").unwrap();
    s.ok(&["synth", "--samples", "60", "--spec", &s.arg("wide.toml"), "--out", &other]);
    s.ok(&["train", "--data", &s.arg("d"), "--epochs", "0", "--out", &s.arg("c")]);
    let out = s.run(&["eval", "--checkpoint", &s.arg("c"), "--data", &other, "--out", &s.arg("e")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("100") && err.contains("80"), "{err}");
    assert!(!s.path("e").exists());
}

#[test]
fn missing_dataset_is_an_error() {
    let s = Sandbox::new();
    let out = s.run(&["train", "--data", &s.arg("absent"), "--out", &s.arg("c")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn unknown_config_key_is_an_error() {
    let s = Sandbox::new();
    s.synth("d", &[]);
    let out = s.run(&["train", "--data", &s.arg("d"), "--set", "hiden_size=3", "--out", &s.arg("c")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden_size"));
}

#[test]
fn ablate_writes_every_artifact_reproducibly() {
    let s = Sandbox::new();
    s.synth("d", &[]);
    for out in ["a1", "a2"] {
        s.ok(&[
            "ablate", "--data", &s.arg("d"), "--epochs", "1", "--folds", "0,1", "--out", &s.arg(out),
        ]);
    }
    let count = |d: &str| fs::read_dir(s.path(d)).unwrap().count();
    assert_eq!(count("a1/reports"), 4);
    assert_eq!(count("a1/comparisons"), 3);
    assert_eq!(count("a1/traces"), 8);
    let summary = fs::read_to_string(s.path("a1/summary.csv")).unwrap();
    assert_eq!(summary, fs::read_to_string(s.path("a2/summary.csv")).unwrap());
    assert_eq!(summary.lines().count(), 1 + 2 * 3);
    let cmp = fs::read_to_string(s.path("a1/comparisons/image_only_vs_multimodal.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 1 + 2 * 2 * 8);
    assert_eq!(
        fs::read(s.path("a1/reports/noisy_text.csv")).unwrap(),
        fs::read(s.path("a2/reports/noisy_text.csv")).unwrap()
    );
}
