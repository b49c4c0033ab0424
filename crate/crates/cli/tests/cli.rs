use std::path::Path;
use std::process::{Command, Output};

use exemplar_seg::checkpoint::{Checkpoint, ModelKind};

const SMALL: [&str; 8] = [
    "--set",
    "phantom.size=64",
    "--set",
    "phantom.n_unlabeled=3",
    "--set",
    "phantom.n_background=2",
    "--set",
    "phantom.n_test=3",
];

fn exseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exseg")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path) -> Output {
    let mut args = vec!["gen-phantom", "--out", path(out)];
    args.extend(SMALL);
    exseg(&args)
}

#[test]
fn evaluate_ground_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = gen(&data);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = dir.path().join("gt");
    Checkpoint::oracle(ModelKind::GroundTruth).save(&ck).unwrap();
    let report = dir.path().join("report");
    let o = exseg(&["evaluate", "--data", path(&data), "--checkpoint", path(&ck), "--out", path(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let line = stdout.lines().find(|l| l.contains("DSC.Avg")).expect(&stdout);
    assert!(line.contains("1.000"), "{line}");
    assert!(report.join("report.csv").exists());
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = exseg(&["gen-phantom", "--out", path(&out), "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = exseg(&["gen-phantom", "--out", path(&out), "--set", "phantom.sizes=32"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope");
    let o = exseg(&["evaluate", "--data", path(&missing), "--checkpoint", path(&missing), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn generation_is_reproducible_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(gen(&a).status.success());
    assert!(gen(&b).status.success());
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    let mb = std::fs::read(b.join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(gen(&a).status.code(), Some(1));
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), ma);
}

#[test]
fn synth_adds_the_synthetic_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen(&data).status.success());
    let out = dir.path().join("synth");
    let o = exseg(&["synth", "--data", path(&data), "--out", path(&out), "--set", "esm.count=4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("synthesized 4 samples"), "{stdout}");
}

#[test]
fn grad_check_passes_and_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = exseg(&["grad-check", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("stage2_loss"), "{stdout}");
    assert!(std::fs::read_dir(&out).unwrap().count() > 0);
}
