use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mimo() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mimo"));
    cmd.env_remove("MIMO_OUTPUT_DIR");
    cmd
}

fn regression() -> Value {
    json!({
        "data": {"kind": "regression", "train_size": 32, "test_size": 50, "seed": 3},
        "network": {"ensemble_size": 2, "input_dim": 1, "hidden_widths": [16], "output_dim": 1,
                    "task": "regression", "architecture": "mimo", "init_seed": 1},
        "sampling": {"batch_size": 8, "seed": 2},
        "optimizer": {"learning_rate": 0.01, "steps": 40}
    })
}

fn blobs(m: usize, architecture: &str) -> Value {
    json!({
        "data": {"kind": "blobs", "train_size": 200, "test_size": 120, "classes": 3, "input_dim": 2,
                 "separation": 4.0, "seed": 11},
        "network": {"ensemble_size": m, "input_dim": 2, "hidden_widths": [12], "output_dim": 3,
                    "task": "classification", "architecture": architecture, "init_seed": 4},
        "sampling": {"batch_size": 16, "seed": 5},
        "optimizer": {"learning_rate": 0.1, "steps": 150, "snapshot_every": 50},
        "landscape": {"resolution": 25, "max_examples": 120}
    })
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    mimo()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn train_into(dir: &Path, config: &Value) -> PathBuf {
    let cfg = write_config(dir, "train.json", config);
    let out = dir.join("run");
    let o = run(&["train"], &cfg, &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn train_writes_checkpoint_loss_curve_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), &regression());
    assert!(out.join("model.ckpt").exists());
    assert_eq!(data_rows(&out.join("loss.csv")), 40);
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("train.manifest.json")).unwrap()).unwrap();
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(files.contains(&"model.ckpt") && files.contains(&"loss.csv"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    // nothing is left behind from atomic writes
    assert!(std::fs::read_dir(&out).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &regression());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["train"], &cfg, &a)), 0);
    assert_eq!(code(&run(&["train"], &cfg, &b)), 0);
    for f in ["loss.csv", "model.ckpt", "metrics.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &regression());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&mimo().args(["train", "--seed", "1", "-c"]).arg(&cfg).arg("-o").arg(&a).output().unwrap()), 0);
    assert_eq!(code(&mimo().args(["train", "--seed", "2", "-c"]).arg(&cfg).arg("-o").arg(&b).output().unwrap()), 0);
    assert_ne!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(b.join("loss.csv")).unwrap());
}

#[test]
fn environment_sets_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &regression());
    let root = dir.path().join("from-env");
    let o = mimo().arg("train").arg("-c").arg(&cfg).env("MIMO_OUTPUT_DIR", &root).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("loss.csv").exists());
}

#[test]
fn invalid_rho_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = regression();
    c["sampling"]["input_repetition_probability"] = json!(1.3);
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sampling.input_repetition_probability"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_and_missing_file_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = regression();
    c["optimizer"]["momentum"] = json!(0.9);
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("optimizer"), "{}", stderr(&o));
    let o = run(&["train"], &dir.path().join("absent.json"), &dir.path().join("out"));
    assert_eq!(code(&o), 4);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = regression();
    c["optimizer"]["learning_rate"] = json!(1e6);
    c["optimizer"]["schedule"] = json!([]);
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn analyses_needing_two_heads_reject_single_head_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = blobs(1, "standard");
    let out = train_into(dir.path(), &c);
    let cfg = dir.path().join("train.json");
    for kind in ["diversity", "invariance", "separation"] {
        let o = mimo()
            .args(["analyze", kind, "--checkpoint"])
            .arg(out.join("model.ckpt"))
            .arg("-c")
            .arg(&cfg)
            .arg("-o")
            .arg(dir.path().join(kind))
            .output()
            .unwrap();
        assert_eq!(code(&o), 2, "{kind}: {}", stderr(&o));
    }
}

#[test]
fn analysis_reports_have_documented_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), &blobs(3, "mimo"));
    let cfg = dir.path().join("train.json");
    let ckpt = out.join("model.ckpt");
    for kind in ["diversity", "invariance", "separation", "metrics", "sparsity"] {
        let o = mimo()
            .args(["analyze", kind, "--checkpoint"])
            .arg(&ckpt)
            .arg("-c")
            .arg(&cfg)
            .arg("-o")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{kind}: {}", stderr(&o));
        assert!(out.join(format!("analyze-{kind}.manifest.json")).exists());
    }
    assert_eq!(data_rows(&out.join("separation.csv")), 12);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    for col in ["accuracy", "nll", "ece"] {
        assert!(header.split(',').any(|h| h == col), "{header}");
    }
    assert!(metrics.lines().any(|l| l.starts_with("ensemble,,test,")));
    assert_eq!(data_rows(&out.join("diversity.csv")), 3 * 9);
}

#[test]
fn separation_counts_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = blobs(2, "mimo");
    c["network"]["hidden_widths"] = json!([6, 5]);
    let out = train_into(dir.path(), &c);
    let o = mimo()
        .args(["analyze", "separation", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .arg("-c")
        .arg(dir.path().join("train.json"))
        .arg("-o")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("separation.csv")), 11);
}

#[test]
fn landscape_rejects_two_subnetworks() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), &blobs(2, "mimo"));
    let o = mimo()
        .args(["landscape", "--checkpoint"])
        .arg(out.join("model.ckpt"))
        .arg("-c")
        .arg(dir.path().join("train.json"))
        .arg("-o")
        .arg(dir.path().join("land"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn landscape_grid_and_anchor_cross_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), &blobs(3, "mimo"));
    let cfg = dir.path().join("train.json");
    let ckpt = out.join("model.ckpt");
    let o = mimo().args(["landscape", "--checkpoint"]).arg(&ckpt).arg("-c").arg(&cfg).arg("-o").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("landscape_grid.csv")), 625);
    assert!(data_rows(&out.join("projection.csv")) > 0);

    let o = mimo()
        .args(["analyze", "metrics", "--checkpoint"])
        .arg(&ckpt)
        .arg("-c")
        .arg(&cfg)
        .arg("-o")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let anchors = csv_rows(&out.join("landscape_anchors.csv"));
    let subnets: Vec<Vec<String>> = csv_rows(&out.join("metrics.csv")).into_iter().filter(|r| r[0] == "subnetwork").collect();
    assert_eq!(anchors.len(), 3);
    assert_eq!(subnets.len(), 3);
    for (a, s) in anchors.iter().zip(&subnets) {
        let (acc_a, acc_s): (f64, f64) = (a[3].parse().unwrap(), s[4].parse().unwrap());
        let (nll_a, nll_s): (f64, f64) = (a[4].parse().unwrap(), s[5].parse().unwrap());
        assert!((acc_a - acc_s).abs() <= 1e-12, "{a:?} vs {s:?}");
        assert!((nll_a - nll_s).abs() <= 1e-12, "{a:?} vs {s:?}");
    }
}

#[test]
fn malformed_checkpoints_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), &blobs(3, "mimo"));
    let cfg = dir.path().join("train.json");
    let good = std::fs::read(out.join("model.ckpt")).unwrap();
    let mut cases = vec![b"nonsense".to_vec(), good[..good.len() - 3].to_vec()];
    let mut extra = good.clone();
    extra.push(0);
    cases.push(extra);
    let mut version = good.clone();
    version[5] = 9;
    cases.push(version);
    for (i, bytes) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.ckpt"));
        std::fs::write(&path, bytes).unwrap();
        let o = mimo()
            .args(["analyze", "metrics", "--checkpoint"])
            .arg(&path)
            .arg("-c")
            .arg(&cfg)
            .arg("-o")
            .arg(dir.path().join("bad"))
            .output()
            .unwrap();
        assert_eq!(code(&o), 4, "case {i}: {}", stderr(&o));
    }
}

#[test]
fn empty_sweep_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = regression();
    c["sweep"] = json!({"axis": "rho", "values": []});
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = run(&["sweep"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sweep.values"), "{}", stderr(&o));
}

#[test]
fn sweep_resumes_from_cached_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = blobs(2, "mimo");
    c["optimizer"]["snapshot_every"] = json!(0);
    c["sweep"] = json!({"axis": "rho", "values": [0.0, 0.5], "replicates": 2, "base_seed": 9});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["sweep"], &cfg, &out)), 0);
    let first = std::fs::read(out.join("sweep.csv")).unwrap();
    assert_eq!(data_rows(&out.join("sweep.csv")), 4 + 2 * 2);

    // a cached cell is reused verbatim, so tampering with it shows up
    let cells = out.join("sweep_cells");
    let sub = std::fs::read_dir(&cells).unwrap().next().unwrap().unwrap().path();
    let cell = sub.join("m2-v0-r0.json");
    let mut cached: Value = serde_json::from_slice(&std::fs::read(&cell).unwrap()).unwrap();
    cached["row"]["final_loss"] = json!(123.5);
    std::fs::write(&cell, serde_json::to_vec(&cached).unwrap()).unwrap();
    assert_eq!(code(&run(&["sweep"], &cfg, &out)), 0);
    assert!(std::fs::read_to_string(out.join("sweep.csv")).unwrap().contains("123.5"));

    // a fresh directory and a parallel pool reproduce the untouched run
    c["workers"] = json!(3);
    let cfg = write_config(dir.path(), "c3.json", &c);
    let fresh = dir.path().join("fresh");
    assert_eq!(code(&run(&["sweep"], &cfg, &fresh)), 0);
    assert_eq!(std::fs::read(fresh.join("sweep.csv")).unwrap(), first);
}

#[test]
fn bias_variance_reports_identity_and_rejects_one_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = regression();
    c["bias_variance"] = json!({"ensemble_sizes": [1], "replicates": 3});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = dir.path().join("out");
    let o = run(&["bias-variance"], &cfg, &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&out.join("bias_variance.csv"));
    assert_eq!(rows.len(), 1);
    let e: f64 = rows[0][3].parse().unwrap();
    let gap: f64 = rows[0][8].parse().unwrap();
    assert!(gap <= 1e-8 * e.max(1.0));

    c["bias_variance"]["replicates"] = json!(1);
    let cfg = write_config(dir.path(), "c1.json", &c);
    let o = run(&["bias-variance"], &cfg, &dir.path().join("out1"));
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let o = mimo().arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = mimo().args(["analyze", "diversity"]).output().unwrap();
    assert_eq!(code(&o), 2);
}
