//! Integration tests driving the compiled `corrnet` binary.

use std::path::Path;
use std::process::Command;

fn corrnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_corrnet"))
}

/// Tiny setup shared by the CLI runs: small model, few sentences.
const SMALL: &[&str] = &[
    "--set",
    "model.stage_widths=[4,8]",
    "--set",
    "model.stage_strides=[2,2]",
    "--set",
    "model.insertion_stages=[2]",
    "--set",
    "model.temporal_channels=8",
    "--set",
    "model.hidden_size=6",
    "--set",
    "model.recurrent_layers=1",
    "--set",
    "model.identification.reduction=4",
    "--set",
    "model.identification.spatial_scales=2",
    "--set",
    "model.identification.temporal_scales=2",
    "--set",
    "data.frame_size=8",
    "--set",
    "train.train_sentences=6",
    "--set",
    "train.dev_sentences=3",
    "--set",
    "train.epochs=1",
];

fn train_into(dir: &Path, seed: &str) {
    let out = corrnet()
        .args(["train", "--out"])
        .arg(dir)
        .args(["--seed", seed])
        .args(SMALL)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_is_deterministic_across_invocations() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    train_into(d1.path(), "3");
    train_into(d2.path(), "3");
    for f in ["metrics.jsonl", "best.ckpt", "last.ckpt", "config.toml", "manifest.json"] {
        assert_eq!(
            std::fs::read(d1.path().join(f)).unwrap(),
            std::fs::read(d2.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn unknown_config_key_fails_with_key_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = corrnet()
        .args(["train", "--out"])
        .arg(dir.path())
        .args(["--set", "train.bogus_knob=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_knob"), "stderr: {stderr}");
}

#[test]
fn config_file_unknown_section_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[optimizer]\nlr = 1.0\n").unwrap();
    let out = corrnet()
        .args(["train", "--out"])
        .arg(dir.path())
        .args(["--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("optimizer"));
}

#[test]
fn evaluate_runs_from_the_run_directory_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path(), "4");
    let out = corrnet()
        .args(["evaluate", "--checkpoint"])
        .arg(dir.path().join("best.ckpt"))
        .args(["--config"])
        .arg(dir.path().join("config.toml"))
        .args(["--split", "dev", "--seed", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let parsed: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert!(parsed["wer"].is_f64() || parsed["wer"].is_u64() || parsed["wer"].is_i64());
    // Matches the dev WER logged during training (same code path).
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let logged: serde_json::Value =
        serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(parsed["wer"], logged["wer"]);
    assert!(dir.path().join("eval_dev.json").exists());
}

#[test]
fn evaluate_rejects_shape_incompatible_checkpoint_naming_parameter() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path(), "5");
    let mut args: Vec<&str> = SMALL.to_vec();
    // Same file, wider recurrent state.
    for a in &mut args {
        if *a == "model.hidden_size=6" {
            *a = "model.hidden_size=4";
        }
    }
    let out = corrnet()
        .args(["evaluate", "--checkpoint"])
        .arg(dir.path().join("best.ckpt"))
        .args(["--split", "dev", "--seed", "5"])
        .args(&args)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lstm."), "stderr: {stderr}");
}

#[test]
fn evaluate_empty_split_fails() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path(), "6");
    let out = corrnet()
        .args(["evaluate", "--checkpoint"])
        .arg(dir.path().join("best.ckpt"))
        .args(["--split", "test", "--seed", "6"])
        .args(SMALL)
        .args(["--set", "train.test_sentences=0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn export_maps_writes_the_documented_schemas() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path(), "7");
    let maps = dir.path().join("maps");
    let out = corrnet()
        .args(["export-maps", "--checkpoint"])
        .arg(dir.path().join("best.ckpt"))
        .args(["--sample", "1", "--stage", "2", "--seed", "7", "--out"])
        .arg(&maps)
        .args(SMALL)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corr = std::fs::read_to_string(maps.join("correlation_stage2.csv")).unwrap();
    assert!(corr.starts_with("t,dir,i,j,a0"));
    for line in corr.lines().skip(1) {
        for v in line.split(',').skip(4) {
            let x: f64 = v.parse().unwrap();
            assert!(x > -0.5 && x < 0.5);
        }
    }
    let attn = std::fs::read_to_string(maps.join("attention_stage2.csv")).unwrap();
    assert!(attn.starts_with("t,h,w,mean_m"));
}

#[test]
fn export_maps_requires_an_inserted_stage() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path(), "8");
    let out = corrnet()
        .args(["export-maps", "--checkpoint"])
        .arg(dir.path().join("best.ckpt"))
        .args(["--sample", "0", "--stage", "1", "--seed", "8", "--out"])
        .arg(dir.path().join("maps"))
        .args(SMALL)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no inserted block"));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = corrnet()
        .args(["train", "--out"])
        .arg(dir.path())
        .args(["--seed", "9", "--epochs", "0"])
        .args(SMALL)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("last.ckpt").exists());
    assert!(!dir.path().join("best.ckpt").exists());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn gradcheck_passes_and_prints_coverage() {
    let out = corrnet().args(["gradcheck", "--seed", "1"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ctc_loss"));
    assert!(stdout.contains("-- op coverage --"));
    assert!(!stdout.contains("FAIL"));
    // Every differentiable op appears in the coverage table.
    for op in corrnet::tensor::tape::DIFFERENTIABLE_OPS {
        assert!(stdout.contains(op), "coverage table missing {op}");
    }
}
