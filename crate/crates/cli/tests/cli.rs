//! End-to-end tests of the `newcast` binary: exit codes, determinism, and
//! the stdout contract of `evaluate`.

use std::path::Path;
use std::process::{Command, Output};

fn newcast(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_newcast"))
        .args(args)
        .current_dir(dir)
        .env_remove("NEWCAST_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn tiny_config(dataset_dir: &Path) -> String {
    serde_json::json!({
        "dataset": {
            "source": "synthetic",
            "path": dataset_dir,
            "horizon": 6,
            "image_size": 32
        },
        "schedule": { "t_max": 8 },
        "model": {
            "n_blocks": 1,
            "channels": 8,
            "ssm_state_dim": 4,
            "step_embed_dim": 8,
            "n_heads": 2,
            "backbone_channels": [4, 8]
        },
        "training": {
            "epochs": 2,
            "batch_size": 4,
            "refiner_epochs": 10
        },
        "evaluation": { "n_samples": 4 },
        "seed": 21
    })
    .to_string()
}

fn generate_tiny_data(root: &Path, out: &str) {
    let gen = newcast(
        &[
            "generate-data",
            "--out",
            out,
            "--seed",
            "5",
            "--n-train",
            "6",
            "--n-test",
            "3",
            "--image-size",
            "32",
        ],
        root,
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
}

#[test]
fn generate_data_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    generate_tiny_data(dir.path(), "a");
    generate_tiny_data(dir.path(), "b");
    let a = std::fs::read(dir.path().join("a/records.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/records.json")).unwrap();
    assert_eq!(a, b, "same seed must produce identical manifests");

    let bad = newcast(
        &["generate-data", "--out", "c", "--n-train", "0"],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = newcast(&["train", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_run_train_sample_refine_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    generate_tiny_data(dir.path(), "data");
    std::fs::write(dir.path().join("run.json"), tiny_config(Path::new("data"))).unwrap();

    let train = newcast(
        &["train", "--config", "run.json", "--run-dir", "run"],
        dir.path(),
    );
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    for file in [
        "diffusion.ckpt.json",
        "refiner.ckpt.json",
        "manifest.json",
        "resolved_config.json",
        "train_state.json",
    ] {
        assert!(dir.path().join("run").join(file).exists(), "missing {file}");
    }

    // rerunning into a non-empty run dir is refused
    let reuse = newcast(
        &["train", "--config", "run.json", "--run-dir", "run"],
        dir.path(),
    );
    assert_eq!(reuse.status.code(), Some(2));

    // identical config + seed reproduces identical checkpoint hashes
    let train2 = newcast(
        &["train", "--config", "run.json", "--run-dir", "run2"],
        dir.path(),
    );
    assert!(train2.status.success());
    assert_eq!(stdout(&train), stdout(&train2).replace("run2", "run"));

    let sample = newcast(
        &["sample", "--run-dir", "run", "--split", "test"],
        dir.path(),
    );
    assert!(
        sample.status.success(),
        "{}",
        String::from_utf8_lossy(&sample.stderr)
    );
    assert!(dir.path().join("run/sheets/test/test-00000.csv").exists());

    let refine = newcast(
        &["refine", "--run-dir", "run", "--split", "test"],
        dir.path(),
    );
    assert!(
        refine.status.success(),
        "{}",
        String::from_utf8_lossy(&refine.stderr)
    );
    assert!(dir.path().join("run/refined/test/test-00000.json").exists());

    let eval = newcast(
        &["evaluate", "--run-dir", "run", "--split", "test"],
        dir.path(),
    );
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let text = stdout(&eval);
    let last = text.trim_end().lines().last().unwrap();
    assert!(
        regex_lite_match(last),
        "final line must be machine-parseable, got: {last}"
    );
    assert!(dir.path().join("run/report-test/report.json").exists());
    assert!(dir.path().join("run/report-test/summary.md").exists());

    // re-render from the stored report
    let report = newcast(
        &["report", "--report-dir", "run/report-test"],
        dir.path(),
    );
    assert!(report.status.success());
}

/// `WAPE=<float> MAE=<float>` with four decimals each.
fn regex_lite_match(line: &str) -> bool {
    let Some(rest) = line.strip_prefix("WAPE=") else {
        return false;
    };
    let Some((w, rest)) = rest.split_once(" MAE=") else {
        return false;
    };
    let four_decimals =
        |s: &str| s.split_once('.').is_some_and(|(i, f)| f.len() == 4 && i.parse::<i64>().is_ok());
    four_decimals(w) && four_decimals(rest) && w.parse::<f64>().is_ok() && rest.parse::<f64>().is_ok()
}

#[test]
fn ablation_flags_are_recorded_and_both_off_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_tiny_data(dir.path(), "data");
    std::fs::write(dir.path().join("run.json"), tiny_config(Path::new("data"))).unwrap();

    let both = newcast(
        &[
            "train",
            "--config",
            "run.json",
            "--run-dir",
            "bad",
            "--ablation",
            "no-image",
            "--ablation",
            "no-temporal",
        ],
        dir.path(),
    );
    assert_eq!(both.status.code(), Some(2));

    let one = newcast(
        &[
            "train",
            "--config",
            "run.json",
            "--run-dir",
            "noimg",
            "--ablation",
            "no-image",
        ],
        dir.path(),
    );
    assert!(
        one.status.success(),
        "{}",
        String::from_utf8_lossy(&one.stderr)
    );
    let resolved: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("noimg/resolved_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(resolved["model"]["use_image"], serde_json::json!(false));
    assert_eq!(resolved["model"]["use_temporal"], serde_json::json!(true));
}

#[test]
fn evaluate_without_run_dir_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = newcast(&["evaluate", "--run-dir", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope"), "message should name the path: {err}");
}
