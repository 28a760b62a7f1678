use std::path::Path;
use std::process::{Command, Output};

use recouple::harness::config::RunConfig;
use recouple::harness::store::read_dataset;
use recouple::harness::train::build_network;

fn recouple(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recouple"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&recouple(&[])), 1);
    assert_eq!(code(&recouple(&["frobnicate"])), 1);
    assert_eq!(code(&recouple(&["train", "--set", "no_equals_sign"])), 1);
    assert_eq!(code(&recouple(&["train", "--set", "bogus_key=3"])), 1);
    assert_eq!(code(&recouple(&["gradcheck", "--module", "nonsense"])), 1);
    assert_eq!(code(&recouple(&["--help"])), 0);
}

#[test]
fn missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = recouple(&["eval", "--checkpoint", path(&missing), "--out", path(dir.path())]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.path().join("missing.txt");
    assert_eq!(code(&recouple(&["train", "--config", path(&cfg)])), 2);
}

#[test]
fn gradcheck_primitives_passes() {
    let out = recouple(&["gradcheck", "--module", "primitives"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max rel. error"));
}

#[test]
fn synth_writes_every_clip() {
    let dir = tempfile::tempdir().unwrap();
    let out = recouple(&[
        "synth", "--classes", "4", "--clips", "8", "--side", "24", "--frames", "8", "--out", path(dir.path()),
    ]);
    assert_eq!(code(&out), 0);
    let clips = read_dataset(dir.path()).unwrap();
    assert_eq!(clips.len(), 32);
    for label in 0..4 {
        assert_eq!(clips.iter().filter(|c| c.label == label).count(), 8);
    }
}

#[test]
fn guidance_rejects_even_structuring_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = recouple(&["guidance", "--k", "4", "--out", path(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn guidance_exports_maps() {
    let dir = tempfile::tempdir().unwrap();
    let out = recouple(&["guidance", "--window", "4", "--k", "3", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let maps = std::fs::read_dir(dir.path()).unwrap().count();
    assert!(maps > 0);
}

#[test]
fn one_epoch_two_stream_run_leaves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = recouple(&[
        "train",
        "--modality",
        "rgbd",
        "--epochs",
        "1",
        "--set",
        "clips_per_class=1",
        "--set",
        "eval_clips_per_class=1",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.txt", "metrics.csv", "best.ckpt", "last.ckpt"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let cfg = RunConfig::parse(&std::fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    build_network(&cfg, Some(&dir.path().join("last.ckpt"))).unwrap();

    // eval picks up the neighbouring config.txt
    let ckpt = dir.path().join("last.ckpt");
    let out = recouple(&["eval", "--checkpoint", path(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("accuracy") && text.contains("capf"));
}
