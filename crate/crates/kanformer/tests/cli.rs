//! Binary-level tests: exit codes, emitted files, determinism.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kanformer"))
}

fn small_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let json = format!(
        r#"{{
        "schema_version": 1,
        "seed": {seed},
        "model": {{ "feature_dim": 8, "model_dim": 16, "heads": 2, "blocks": 1,
                   "cheby_degree": 2, "depthwise_kernel": 5 }},
        "train": {{ "max_epochs": 2, "top_k": 2, "batch_size": 4 }},
        "data": {{ "source": "synthetic",
                  "synthetic": {{ "n_per_class": 20, "t_frames": 30, "feature_dim": 8, "seed": 3 }},
                  "t_fix": 30 }}
    }}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn gen_data_writes_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    for tag in ["a", "b"] {
        let out = dir.path().join(tag);
        let status = bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = dir.path().join("a");
    let files: Vec<_> = std::fs::read_dir(a.join("features")).unwrap().collect();
    assert_eq!(files.len(), 40);
    let manifest = std::fs::read_to_string(a.join("train.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 28); // header + 70% of 40
    assert_eq!(
        std::fs::read_to_string(a.join("dev.csv")).unwrap().lines().count(),
        1 + 6
    );
    assert_eq!(
        std::fs::read_to_string(a.join("eval.csv")).unwrap().lines().count(),
        1 + 6
    );
    // byte-identical across runs at the same seed
    for rel in ["train.csv", "features/bona_0000.kft1", "features/spoof_0019.kft1"] {
        let x = std::fs::read(dir.path().join("a").join(rel)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(rel)).unwrap();
        assert_eq!(x, y, "{rel} differs between identical runs");
    }
}

#[test]
fn invalid_config_exits_1_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "schema_version": 1, "seed": 1, "tpyo": true }"#).unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    assert!(!out.exists(), "invalid config must not create output files");
}

#[test]
fn train_then_eval_from_files_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5);
    let data = dir.path().join("data");
    assert!(bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());

    // switch the config to the files source pointing at the generated dir
    let files_cfg = dir.path().join("files.json");
    let json = format!(
        r#"{{
        "schema_version": 1,
        "seed": 5,
        "model": {{ "feature_dim": 8, "model_dim": 16, "heads": 2, "blocks": 1,
                   "cheby_degree": 2, "depthwise_kernel": 5 }},
        "train": {{ "max_epochs": 1, "top_k": 1, "batch_size": 4 }},
        "data": {{ "source": "files", "dir": {:?}, "t_fix": 30 }}
    }}"#,
        data.to_str().unwrap()
    );
    std::fs::write(&files_cfg, json).unwrap();

    let out = dir.path().join("run");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&files_cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    assert!(out.join("best.kfck").is_file());
    assert!(out.join("top1.kfck").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);

    // eval twice: identical score files (pure eval)
    for tag in ["e1", "e2"] {
        assert!(bin()
            .args(["eval", "--config"])
            .arg(&files_cfg)
            .args(["--checkpoint"])
            .arg(out.join("best.kfck"))
            .args(["--split", "eval", "--out"])
            .arg(dir.path().join(tag))
            .status()
            .unwrap()
            .success());
    }
    let s1 = std::fs::read(dir.path().join("e1/scores_eval.txt")).unwrap();
    let s2 = std::fs::read(dir.path().join("e2/scores_eval.txt")).unwrap();
    assert_eq!(s1, s2);
    assert!(dir.path().join("e1/metrics_eval.json").is_file());
}

#[test]
fn eval_with_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let status = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--checkpoint"])
        .arg(dir.path().join("missing.kfck"))
        .args(["--split", "eval", "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn eval_with_mismatched_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 7);
    let out = dir.path().join("run");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    // same checkpoint, different architecture
    let other = small_config(&dir.path().join("."), 7);
    let text = std::fs::read_to_string(&other).unwrap();
    std::fs::write(&other, text.replace("\"model_dim\": 16", "\"model_dim\": 32")).unwrap();
    let status = bin()
        .args(["eval", "--config"])
        .arg(&other)
        .args(["--checkpoint"])
        .arg(out.join("best.kfck"))
        .args(["--split", "dev", "--out"])
        .arg(dir.path().join("e"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_corruption_exits_3() {
    let ok = bin().args(["gradcheck"]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let out = String::from_utf8_lossy(&ok.stdout);
    assert!(out.matches("PASS").count() >= 10, "{out}");

    let bad = bin()
        .args(["gradcheck", "--corrupt", "chebykan_layer"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(3));
    let out = String::from_utf8_lossy(&bad.stdout);
    assert!(out.contains("FAIL"), "{out}");
}
