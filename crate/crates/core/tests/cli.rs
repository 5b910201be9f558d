use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stain-diffusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(err.trim_end().lines().count(), 1, "expected one error line, got {err:?}");
    err.trim_end().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small dataset, a one-epoch denoiser and a short classifier, shared across tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("ds")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("tr/denoiser.json")
    }
    fn clf(&self) -> PathBuf {
        self.root.join("clf")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        run_ok(&["synth-data", "--n", "16", "--size", "16", "--seed", "3", "--out", p(&f.data())]);
        run_ok(&[
            "train", "--data", p(&f.data()), "--epochs", "1", "--timesteps", "4", "--base-width", "4",
            "--t-embedding-dim", "8", "--out", p(&f.root.join("tr")),
        ]);
        run_ok(&["classifier", "--data", p(&f.data()), "--epochs", "3", "--width", "4", "--out", p(&f.clf())]);
        f
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["synth-data", "--n", "6", "--size", "16", "--seed", "9", "--out", p(out)]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(dir_bytes(&a.join("HE")), dir_bytes(&b.join("HE")));
    assert_eq!(dir_bytes(&a.join("IHC")), dir_bytes(&b.join("IHC")));
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "synth-data");
    assert_eq!(manifest["global"]["seed"], 9);
}

#[test]
fn synth_data_single_class_balance() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["synth-data", "--n", "8", "--size", "16", "--class-balance", "1,0,0,0", "--out", p(dir.path())]);
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert!(labels.lines().skip(1).all(|l| l.split(',').nth(1) == Some("0")), "{labels}");
}

#[test]
fn sample_is_byte_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["sample", "--data", p(&f.data()), "--checkpoint", p(&f.ckpt()), "--mask", "both", "--seed", "1", "--out", p(out)]);
    }
    let files = dir_bytes(&a);
    assert!(!files.is_empty());
    assert_eq!(files, dir_bytes(&b));
}

#[test]
fn sample_rejects_schedule_mismatch_and_missing_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sample", "--data", p(&f.data()), "--checkpoint", p(&f.ckpt()), "--mask", "noise", "--timesteps", "7", "--out", p(dir.path())]);
    assert!(error_line(&out).starts_with("error: kind=version"));
    let missing = dir.path().join("nope.json");
    let out = run(&["sample", "--data", p(&f.data()), "--checkpoint", p(&missing), "--mask", "both", "--out", p(dir.path())]);
    let line = error_line(&out);
    assert!(line.starts_with("error: kind=io") && line.contains("nope.json"), "{line}");
}

#[test]
fn evaluate_identity_gives_perfect_quality() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "evaluate", "--real", p(&f.data()), "--generated", p(&f.data().join("IHC")), "--names", "identity",
        "--classifier", p(&f.clf().join("classifier_properly_fit.json")), "--out", p(dir.path()),
    ]);
    let m = &read_json(&dir.path().join("metrics.json"))[0];
    assert_eq!(m["ssim"], 1.0);
    assert_eq!(m["psnr_db"], "Inf");
    let acc = m["accuracy"].as_f64().unwrap();
    assert_eq!(m["sfs"].as_f64().unwrap(), (acc + 1.0) / 2.0);
}

#[test]
fn evaluate_runs_report_std_fields() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "evaluate", "--real", p(&f.data()), "--checkpoint", p(&f.ckpt()), "--masks", "both,noise", "--runs", "3",
        "--classifier", p(&f.clf()), "--out", p(dir.path()),
    ]);
    let metrics = read_json(&dir.path().join("metrics.json"));
    let methods = metrics.as_array().unwrap();
    assert_eq!(methods.len(), 2);
    for m in methods {
        assert_eq!(m["runs"], 3);
        for key in ["ssim_std", "psnr_std", "accuracy_std", "sfs_std", "quality_rank"] {
            assert!(m.get(key).is_some(), "missing {key} in {m}");
        }
    }
    assert!(fs::read_to_string(dir.path().join("metrics.md")).unwrap().contains("Quality Rank"));
}

#[test]
fn evaluate_rejects_unmatched_ids() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    fs::create_dir_all(&gen).unwrap();
    fs::copy(f.data().join("IHC/syn_00000.png"), gen.join("unknown_patch.png")).unwrap();
    let out = run(&["evaluate", "--real", p(&f.data()), "--generated", p(&gen), "--out", p(&dir.path().join("o"))]);
    assert!(error_line(&out).starts_with("error: kind=pairing"));
}

#[test]
fn perturb_writes_report_and_is_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["perturb", "--data", p(&f.data()), "--classifier", p(&f.clf()), "--perturbations", "translate:2,elastic:low", "--out", p(out)]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let report = read_json(&a.join("perturbation.json"));
    assert_eq!(report["baseline"]["ssim"], 1.0);
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    let out = run(&["perturb", "--data", p(&f.data()), "--classifier", p(&f.clf()), "--perturbations", "translate:50", "--out", p(&a)]);
    assert!(error_line(&out).starts_with("error: kind=invalid-argument"));
}

#[test]
fn saliency_exports_maps() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "saliency", "--checkpoint", p(&f.ckpt()), "--data", p(&f.data()), "--n-masks", "20", "--cell", "4",
        "--timesteps", "4,1", "--out", p(dir.path()),
    ]);
    for name in ["saliency.npy", "saliency.json", "saliency.md", "saliency_t0004.png", "saliency_t0001.png"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let out = run(&["saliency", "--checkpoint", p(&f.ckpt()), "--data", p(&f.data()), "--cell", "5", "--out", p(dir.path())]);
    assert!(error_line(&out).starts_with("error: kind=invalid-argument"));
}

#[test]
fn classifier_writes_all_stages() {
    let f = fixture();
    for stage in ["underfit", "properly_fit", "overfit"] {
        assert!(f.clf().join(format!("classifier_{stage}.json")).exists());
    }
    assert!(fs::read_to_string(f.clf().join("curves.csv")).unwrap().starts_with("epoch,loss,train_acc,test_acc"));
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    run_ok(&["synth-data", "--n", "8", "--size", "16", "--class-balance", "1,0,0,0", "--out", p(&one)]);
    let out = run(&["classifier", "--data", p(&one), "--epochs", "3", "--out", p(&dir.path().join("c"))]);
    assert!(error_line(&out).starts_with("error: kind=invalid-argument"));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[synth-data]\nn = 4\n").unwrap();
    let out = dir.path().join("o");
    run_ok(&["synth-data", "--n", "9", "--size", "16", "--seed", "1", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(fs::read_to_string(out.join("labels.csv")).unwrap().lines().count(), 5);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["global"]["seed"], 5);
    assert_eq!(manifest["config"]["n"], 4);

    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = run(&["synth-data", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert!(error_line(&out).starts_with("error: kind=invalid-argument"));
}

#[test]
fn bad_flags_give_one_line_error() {
    let out = run(&["train", "--epochs", "many"]);
    let line = error_line(&out);
    assert!(line.starts_with("error: kind=invalid-argument msg="), "{line}");
    assert_eq!(out.status.code(), Some(2));
}
