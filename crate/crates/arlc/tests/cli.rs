//! Command-line behavior: exit statuses, required flags, artifact layout.

use std::path::PathBuf;
use std::process::Command;

fn arlc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arlc"))
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn phase_two_without_checkpoint_is_a_usage_error() {
    let out = arlc()
        .args(["train", "--family", "recurrent", "--phase", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--from-checkpoint"), "{stderr}");
}

#[test]
fn unknown_flags_exit_two() {
    let out = arlc().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_phase_is_a_usage_error() {
    let out = arlc()
        .args(["train", "--phase", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epoch_train_writes_an_initialized_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = arlc()
        .args([
            "train",
            "--family",
            "baseline",
            "--epochs",
            "0",
            "--seed",
            "5",
            "--quiet",
        ])
        .arg("--data-dir")
        .arg(data_dir())
        .arg("--out-dir")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run_dir = tmp.path().join("baseline-p1-s5");
    let ckpt = arlc::checkpoint::Checkpoint::load(&run_dir.join("phase1.ckpt")).unwrap();
    assert_eq!(ckpt.store.total_params(), 880);
    assert_eq!(ckpt.config_value("phase"), Some("1"));
    assert_eq!(ckpt.config_value("seed"), Some("5"));

    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.trim(), "run,phase,epoch,iter,loss,kaizen,acc,seconds");
    assert!(run_dir.join("config.txt").exists());
}

#[test]
fn eval_prints_one_line_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let status = arlc()
        .args([
            "train", "--family", "baseline", "--epochs", "0", "--seed", "6", "--quiet",
        ])
        .arg("--data-dir")
        .arg(data_dir())
        .arg("--out-dir")
        .arg(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());

    let ckpt = tmp.path().join("baseline-p1-s6/phase1.ckpt");
    let out = arlc()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data-dir")
        .arg(data_dir())
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("iteration")).collect();
    assert_eq!(lines.len(), 1, "{stdout}");
    assert!(tmp.path().join("baseline-p1-s6/phase1.eval.csv").exists());
}

#[test]
fn eval_rejects_corrupt_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.ckpt");
    std::fs::write(&path, b"XXXX not a checkpoint").unwrap();
    let out = arlc()
        .args(["eval", "--checkpoint"])
        .arg(&path)
        .arg("--data-dir")
        .arg(data_dir())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn gradcheck_passes_and_detects_planted_corruption() {
    let out = arlc().args(["gradcheck", "--seed", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("matmul"));
    assert!(stdout.contains("end_to_end_k3"));

    let out = arlc()
        .args(["gradcheck", "--seed", "3", "--self-test-corrupt", "conv2d"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv2d"));
}

#[test]
fn gradcheck_is_repeatable() {
    let run = || {
        let out = arlc().args(["gradcheck", "--seed", "9"]).output().unwrap();
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    assert_eq!(run(), run());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    std::fs::write(&cfg_path, "epochs=0\nseed=40\n# comment\n").unwrap();
    let out = arlc()
        .args(["train", "--quiet", "--seed", "41", "--config"])
        .arg(&cfg_path)
        .arg("--data-dir")
        .arg(data_dir())
        .arg("--out-dir")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overrides config file key"));
    assert!(tmp.path().join("baseline-p1-s41").exists());
}
