//! End-to-end tests of the command-line binary: the full generate → train →
//! evaluate → dump → rescore pipeline, flag composition, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slotgrow"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to launch the binary")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{} failed\nstdout: {}\nstderr: {}",
        what,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny but complete pass through every subcommand, checking that the
/// offline mask-scoring path reproduces direct evaluation exactly.
#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = run(
        &[
            "gen-data",
            "--clips",
            "4",
            "--seed",
            "5",
            "--out",
            "clips.scv",
            "--frames",
            "3",
            "--height",
            "16",
            "--width",
            "16",
            "--objects",
            "1-2",
            "--size",
            "3-5",
        ],
        d,
    );
    assert_ok(&out, "gen-data");
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 4 clips"));

    let train_args = [
        "train",
        "--data",
        "clips.scv",
        "--out",
        "model.sck",
        "--log",
        "train.log",
        "--iters",
        "8",
        "--batch-size",
        "2",
        "--set",
        "patch=4",
        "--set",
        "d_feat=6",
        "--set",
        "n=16",
        "--set",
        "d_slot=8",
        "--set",
        "hidden=8",
        "--set",
        "dec_hidden=8",
        "--set",
        "k_max=8",
        "--set",
        "l_first=2",
        "--set",
        "l_later=1",
    ];
    let out = run(&train_args, d);
    assert_ok(&out, "train");
    assert!(d.join("model.sck").exists());
    assert!(d.join("model.sck.cfg").exists(), "config sidecar missing");
    let log = std::fs::read_to_string(d.join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("iter=")).count(), 8);
    assert!(log.lines().any(|l| l.starts_with("config total_iters=8")));

    // direct evaluation from the checkpoint (sidecar discovered)
    let out = run(
        &[
            "eval", "--ckpt", "model.sck", "--data", "clips.scv", "--out", "direct",
        ],
        d,
    );
    assert_ok(&out, "eval --ckpt");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("config sidecar"),
        "expected a sidecar note on stderr"
    );
    let direct = std::fs::read_to_string(d.join("direct.txt")).unwrap();
    assert!(direct.contains("fg_ari_video"));
    assert!(d.join("direct.json").exists());

    // dump masks, then score them offline: must match the direct numbers
    let out = run(
        &[
            "infer", "--ckpt", "model.sck", "--data", "clips.scv", "--out-dir", "masks",
        ],
        d,
    );
    assert_ok(&out, "infer");
    for clip in 0..4 {
        assert!(d.join("masks").join(format!("clip_{:06}.scm", clip)).exists());
    }
    let out = run(
        &[
            "eval",
            "--masks-dir",
            "masks",
            "--data",
            "clips.scv",
            "--out",
            "offline",
        ],
        d,
    );
    assert_ok(&out, "eval --masks-dir");
    let offline = std::fs::read_to_string(d.join("offline.txt")).unwrap();
    assert_eq!(direct, offline, "offline scoring diverged from direct eval");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // unknown subcommand
    let out = run(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(2));

    // inverted range
    let out = run(
        &[
            "gen-data", "--clips", "1", "--out", "x.scv", "--objects", "4-2",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("objects"));

    // unknown config key is rejected, not ignored
    let out = run(
        &[
            "train", "--data", "missing.scv", "--out", "m.sck", "--set", "no_such_key=1",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    // eval needs exactly one of --ckpt / --masks-dir
    let out = run(&["eval", "--data", "x.scv", "--out", "r"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(
        &[
            "gen-data", "--clips", "2", "--seed", "1", "--out", "clips.scv", "--frames",
            "3", "--height", "16", "--width", "16", "--objects", "1-1", "--size", "3-5",
        ],
        d,
    );
    assert_ok(&out, "gen-data");

    // an absurd learning rate with clipping disabled blows up immediately
    let out = run(
        &[
            "train",
            "--data",
            "clips.scv",
            "--out",
            "model.sck",
            "--iters",
            "4",
            "--batch-size",
            "1",
            "--lr",
            "1e12",
            "--set",
            "clip_norm=0",
            "--set",
            "tau=1e-18",
            "--set",
            "patch=4",
            "--set",
            "d_feat=6",
            "--set",
            "n=16",
            "--set",
            "d_slot=8",
            "--set",
            "hidden=8",
            "--set",
            "dec_hidden=8",
            "--set",
            "k_max=8",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(3), "divergence must exit 3");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite"), "stderr: {}", err);
}
