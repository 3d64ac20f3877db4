use std::path::Path;
use std::process::{Command, Output};

use esfpnet::data::{write_dataset, SynthConfig, CLINIC_DB, KVASIR};

fn esfpnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esfpnet"))
        .args(args)
        .env_remove("ESFPNET_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_data(root: &Path) {
    let cfg = SynthConfig {
        width: 32,
        height: 32,
        lesion_prob: 0.7,
        ..Default::default()
    };
    write_dataset(root, KVASIR, 20, &cfg, 1).unwrap();
    write_dataset(root, CLINIC_DB, 10, &cfg, 2).unwrap();
}

#[test]
fn bench_b2_prints_the_complexity_report() {
    let o = esfpnet(&["bench", "--variant", "B2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("# variant=B2"));
    assert!(text.contains("# config_sha256="));
    assert!(text.contains("variant B2 at input (1, 3, 352, 352)"));
    assert!(text.contains("GFLOPs"));
}

#[test]
fn split_is_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let root = dir.path().to_str().unwrap();
    let args = [
        "split",
        "--protocol",
        "learning-ability",
        "--seed",
        "1",
        "--data-root",
        root,
    ];
    let (a, b) = (esfpnet(&args), esfpnet(&args));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("protocol"));
    assert!(stdout(&a).contains("# seed=1"));
}

#[test]
fn artifact_header_reruns_to_the_same_output() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let root = dir.path().to_str().unwrap();
    let out = dir.path().join("out");
    let first = esfpnet(&[
        "split",
        "--protocol",
        "learning-ability",
        "--seed",
        "4",
        "--data-root",
        root,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(first.status.success());
    let artifact = out.join("manifest.txt");
    let again = esfpnet(&["split", "--config", artifact.to_str().unwrap()]);
    assert!(
        again.status.success(),
        "{}",
        String::from_utf8_lossy(&again.stderr)
    );
    assert_eq!(stdout(&first), stdout(&again));
    assert_eq!(std::fs::read_to_string(&artifact).unwrap(), stdout(&again));
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_esfpnet"))
        .args(["split", "--seed", "2"])
        .env("ESFPNET_DATA", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_subcommand_and_flag_exit_with_2() {
    assert_eq!(esfpnet(&["frobnicate"]).status.code(), Some(2));
    let o = esfpnet(&["bench", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn runtime_errors_exit_nonzero() {
    let o = esfpnet(&["split", "--data-root", "/nonexistent/esfpnet-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing datasets"));
    assert_eq!(
        esfpnet(&["bench", "--variant", "B7"]).status.code(),
        Some(1)
    );
}

#[test]
fn stream_synthetic_frames_reports_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = esfpnet(&[
        "stream",
        "--synthetic-frames",
        "4",
        "--input-size",
        "64",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("frames=4"));
    assert!(out.join("frames").join("overlay_000003.png").exists());
    assert!(out.join("throughput.txt").exists());
}

#[test]
fn train_then_eval_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let root = dir.path().to_str().unwrap();
    let out = dir.path().join("run");
    let o = esfpnet(&[
        "train",
        "--data-root",
        root,
        "--datasets",
        KVASIR,
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--input-size",
        "32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("learning-ability protocol"));
    let ckpt = out
        .join("checkpoints")
        .join(KVASIR)
        .join("best.safetensors");
    assert!(ckpt.exists());
    let e = esfpnet(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--data-root",
        root,
        "--datasets",
        CLINIC_DB,
        "--input-size",
        "32",
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(stdout(&e).contains(CLINIC_DB));
}
