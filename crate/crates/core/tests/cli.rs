//! End-to-end runs of the `crashchat` binary on tiny configs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn crashchat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crashchat")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = crashchat(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 14] = [
    "--set",
    "dataset.synthetic.numPositive=16",
    "--set",
    "dataset.synthetic.numNegative=16",
    "--set",
    "train.independentLc.epochs=1",
    "--set",
    "train.independentPc.epochs=1",
    "--set",
    "train.homogeneousLc.epochs=1",
    "--set",
    "train.homogeneousPc.epochs=1",
    "--set",
    "train.heterogeneous.epochs=1",
];

fn tiny_run(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    crashchat(&args)
}

fn status(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_every_artifact_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("tiny");
    let out = tiny_run(&dir, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("config "));
    assert!(table.contains("Crash recognition"));

    let st = status(&dir);
    let hash = st["configHash"].as_str().unwrap().to_string();
    assert_eq!(st["state"], "complete");
    assert!(fs::read_to_string(dir.join("config.toml")).unwrap().contains(&hash));
    for name in ["init", "ind-a", "ind-f", "homo-lc", "homo-pc", "hete", "crashchat"] {
        assert!(dir.join(format!("checkpoints/{name}.ckpt")).is_file(), "{name}");
    }
    for name in ["ind-a", "homo-pc", "hete", "crashchat"] {
        let m: Value =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("metrics/{name}.json"))).unwrap()).unwrap();
        assert_eq!(m["configHash"], hash.as_str());
        assert!(fs::read_to_string(dir.join(format!("metrics/{name}.txt")))
            .unwrap()
            .starts_with(&format!("config {hash}")));
    }
    let cmp: Value = serde_json::from_str(&fs::read_to_string(dir.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp["configHash"], hash.as_str());

    // Every stage record lists file hashes that match the files on disk.
    for stage in ["dataset", "train", "assemble", "infer", "eval", "report"] {
        let rec: Value =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("stages/{stage}.json"))).unwrap()).unwrap();
        assert_eq!(rec["configHash"], hash.as_str());
        let files = rec["files"].as_object().unwrap();
        assert!(!files.is_empty(), "{stage}");
        for (path, digest) in files {
            use sha2::{Digest, Sha256};
            let bytes = fs::read(dir.join(path)).unwrap();
            assert_eq!(hex::encode(Sha256::digest(&bytes)), digest.as_str().unwrap(), "{path}");
        }
    }

    // A second invocation finds every stage done and changes nothing.
    let before = fs::read(dir.join("metrics/crashchat.json")).unwrap();
    let modified = fs::metadata(dir.join("checkpoints/hete.ckpt")).unwrap().modified().unwrap();
    let out = tiny_run(&dir, &[]);
    assert!(out.status.success());
    assert_eq!(fs::read(dir.join("metrics/crashchat.json")).unwrap(), before);
    assert_eq!(fs::metadata(dir.join("checkpoints/hete.ckpt")).unwrap().modified().unwrap(), modified);

    // The report subcommand reproduces the stored table.
    assert_eq!(
        ok(&["report", "--run", dir.to_str().unwrap()]),
        fs::read_to_string(dir.join("comparison.txt")).unwrap()
    );
}

#[test]
fn changed_config_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("tiny");
    assert!(tiny_run(&dir, &["--stages", "dataset"]).status.success());
    assert_eq!(status(&dir)["state"], "partial");
    let first = status(&dir)["configHash"].as_str().unwrap().to_string();

    let out = tiny_run(&dir, &["--stages", "dataset", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&first));

    assert!(tiny_run(&dir, &["--stages", "dataset", "--seed", "5", "--force"]).status.success());
    assert_ne!(status(&dir)["configHash"].as_str().unwrap(), first);
}

#[test]
fn dataset_stage_alone_trains_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("tiny");
    let out = tiny_run(&dir, &["--stages", "dataset"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    assert!(dir.join("dataset/videos.jsonl").is_file());
    assert!(dir.join("dataset/qa.jsonl").is_file());
    assert!(!dir.join("checkpoints").exists());
    assert!(dir.join("stages/dataset.json").is_file());
    assert!(!dir.join("stages/train.json").exists());
}

#[test]
fn bad_override_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = crashchat(&["run", "--out", tmp.path().to_str().unwrap(), "--set", "dataset.split.ratios=[0.5,0.5,0.5]"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn step_by_step_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let data = p("data");
    ok(&["dataset", "synth", "--out", &data, "--positives", "12", "--negatives", "12"]);
    ok(&["dataset", "split", "--data", &data, "--ratios", "0.6,0.2,0.2"]);
    let qa = fs::read_to_string(tmp.path().join("data/qa.jsonl")).unwrap();
    assert_eq!(qa.lines().count(), 12 * 6 + 12 * 4);

    ok(&["train", "--regime", "heterogeneous", "--data", &data, "--out", &p("hete.ckpt"), "--epochs", "1"]);
    ok(&[
        "train",
        "--regime",
        "homogeneous",
        "--group",
        "pc",
        "--data",
        &data,
        "--out",
        &p("homo-pc.ckpt"),
        "--epochs",
        "1",
    ]);
    ok(&[
        "train",
        "--regime",
        "independent",
        "--task",
        "b",
        "--data",
        &data,
        "--out",
        &p("ind-b.ckpt"),
        "--epochs",
        "1",
    ]);
    assert!(tmp.path().join("hete.csv").is_file());
    ok(&["assemble", "--hetero", &p("hete.ckpt"), "--homo-pc", &p("homo-pc.ckpt"), "--out", &p("crashchat.ckpt")]);

    let gated = ok(&["infer", "--checkpoint", &p("crashchat.ckpt"), "--data", &data, "--split", "test"]);
    let test_videos = fs::read_to_string(tmp.path().join("data/split/test.jsonl")).unwrap().lines().count();
    assert_eq!(gated.lines().count(), test_videos * 6);

    ok(&[
        "infer",
        "--checkpoint",
        &p("ind-b.ckpt"),
        "--data",
        &data,
        "--tasks",
        "b",
        "--direct",
        "lc",
        "--out",
        &p("ind-b.jsonl"),
    ]);
    let table = ok(&["eval", "--predictions", &p("ind-b.jsonl"), "--data", &data, "--out", &p("ind-b.json")]);
    assert!(table.contains("BLEU"));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("ind-b.json")).unwrap()).unwrap();
    assert!(report["tasks"]["b"]["metrics"]["ROUGE"].is_number());
}
