//! End-to-end checks of the `revit` binary: workflows, file outputs, exit
//! codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_revit")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin()).args(args).current_dir(cwd).output().expect("spawn revit")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY_CONFIG: &str = r#"{
  "model": {
    "image_size": 32, "patch_size": 8, "dim": 16, "depth": 2, "heads": 2,
    "mlp_ratio": 2, "num_classes": 4, "variant": "revit",
    "alpha_mode": "shared", "seed": 7
  },
  "train": {
    "epochs": 3, "batch_size": 32, "base_lr": 0.006, "warmup_epochs": 1,
    "weight_decay": 0.0, "grad_clip_norm": 5.0, "seed": 7, "schedule": "cosine"
  },
  "synthetic": { "n": 64, "val": 32, "seed": 42 }
}"#;

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> String {
    let cfg = write_config(dir, TINY_CONFIG);
    let mut args = vec!["train", "--config", &cfg, "--data", "synthetic", "--out", "run"];
    args.extend_from_slice(extra);
    let out = run(&args, dir);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("checkpoint="));
    dir.join("run").join("best.rvt").to_string_lossy().into_owned()
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), &[]);
    assert!(Path::new(&ckpt).exists());
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,step,lr,train_loss,train_acc,val_acc,alpha_0,alpha_1"
    );
    assert_eq!(lines.count(), 3);
}

/// Training the residual variant with the gate pinned at 1 must reproduce
/// the plain variant's metrics log.
#[test]
fn fixed_gate_one_matches_plain_variant_metrics() {
    let dir_a = tempfile::tempdir().unwrap();
    train_tiny(dir_a.path(), &["--alpha-mode", "fixed:1.0"]);
    let dir_b = tempfile::tempdir().unwrap();
    train_tiny(dir_b.path(), &["--variant", "vit"]);
    let a = std::fs::read_to_string(dir_a.path().join("run/metrics.csv")).unwrap();
    let b = std::fs::read_to_string(dir_b.path().join("run/metrics.csv")).unwrap();
    for (la, lb) in a.lines().skip(1).zip(b.lines().skip(1)) {
        for (fa, fb) in la.split(',').zip(lb.split(',')) {
            let (va, vb): (f64, f64) = (fa.parse().unwrap(), fb.parse().unwrap());
            assert!((va - vb).abs() < 1e-5, "{va} vs {vb}\nA: {la}\nB: {lb}");
        }
    }
}

#[test]
fn eval_zero_perturb_equals_plain_and_sweep_is_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), &[]);
    let plain = run(&["eval", "--ckpt", &ckpt, "--data", "synthetic"], dir.path());
    assert_ok(&plain);
    let zero = run(
        &["eval", "--ckpt", &ckpt, "--data", "synthetic", "--perturb", "hshift:0"],
        dir.path(),
    );
    assert_ok(&zero);
    assert_eq!(stdout(&plain), stdout(&zero));
    assert!(stdout(&plain).starts_with("top1="));

    let sweep = run(
        &["eval", "--ckpt", &ckpt, "--data", "synthetic", "--perturb", "scale:all"],
        dir.path(),
    );
    assert_ok(&sweep);
    let text = stdout(&sweep);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,percent,top1,drop");
    assert_eq!(lines.len(), 5);
    for (line, pct) in lines[1..].iter().zip(["15", "30", "45", "60"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], "scale");
        assert_eq!(cells[1], pct);
        cells[2].parse::<f64>().unwrap();
        cells[3].parse::<f64>().unwrap();
    }
}

#[test]
fn analyze_nonlocality_compares_two_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_a = train_tiny(dir.path(), &[]);
    let dir_b = tempfile::tempdir().unwrap();
    let ckpt_b = train_tiny(dir_b.path(), &["--variant", "vit"]);
    let out = run(
        &[
            "analyze", "--ckpt", &ckpt_a, "--ckpt", &ckpt_b, "--data", "synthetic",
            "--metric", "nonlocality", "--samples", "3", "--out", "reports",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let head = std::fs::read_to_string(dir.path().join("reports/nonlocality_head.csv")).unwrap();
    // header + 2 models x 2 layers x 2 heads
    assert_eq!(head.lines().count(), 1 + 2 * 2 * 2);
    assert!(head.lines().nth(1).unwrap().starts_with("m0-revit,0,0,"));
    let layer = std::fs::read_to_string(dir.path().join("reports/nonlocality_layer.csv")).unwrap();
    assert_eq!(layer.lines().count(), 1 + 2 * 2);
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("reports/nonlocality_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json["reports"].as_array().unwrap().len(), 2);
    assert_eq!(json["reports"][0]["samples"], 3);
    // the residual model logs the decomposition-vs-exact comparison
    assert_eq!(json["decomposition"][0][0], "m0-revit");
}

#[test]
fn analyze_similarity_writes_one_matrix_per_image_layer() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), &[]);
    let out = run(
        &[
            "analyze", "--ckpt", &ckpt, "--data", "synthetic", "--metric", "similarity",
            "--samples", "2", "--out", "sim",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let files: Vec<String> = std::fs::read_dir(dir.path().join("sim"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    // 2 images x 2 layers, plus the JSON index
    assert_eq!(files.iter().filter(|f| f.ends_with(".csv")).count(), 4);
    assert!(files.contains(&"similarity_index_m0-revit.json".to_string()));
    let body =
        std::fs::read_to_string(dir.path().join("sim/similarity_m0-revit_img0_layer0.csv"))
            .unwrap();
    // patch-level: 16 x 16 for a 4x4 grid
    assert_eq!(body.lines().count(), 16);
    assert_eq!(body.lines().next().unwrap().split(',').count(), 16);
}

#[test]
fn analyze_alpha_notices_plain_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), &["--variant", "vit"]);
    let out = run(
        &[
            "analyze", "--ckpt", &ckpt, "--data", "synthetic", "--metric", "alpha",
            "--samples", "1", "--out", "alpha",
        ],
        dir.path(),
    );
    assert_ok(&out);
    assert!(stdout(&out).contains("notice"));
    let body = std::fs::read_to_string(dir.path().join("alpha/alpha_m0-vit.csv")).unwrap();
    assert_eq!(body, "layer,alpha\n");

    let dir2 = tempfile::tempdir().unwrap();
    let ckpt2 = train_tiny(dir2.path(), &[]);
    let out2 = run(
        &[
            "analyze", "--ckpt", &ckpt2, "--data", "synthetic", "--metric", "alpha",
            "--samples", "1", "--out", "alpha",
        ],
        dir2.path(),
    );
    assert_ok(&out2);
    let body2 = std::fs::read_to_string(dir2.path().join("alpha/alpha_m0-revit.csv")).unwrap();
    assert_eq!(body2.lines().count(), 3); // header + one row per layer
}

#[test]
fn export_attn_is_deterministic_and_row_stochastic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), &[]);
    let export = |out: &str| {
        let res = run(
            &["export-attn", "--ckpt", &ckpt, "--data", "synthetic", "--image", "1", "--out", out],
            dir.path(),
        );
        assert_ok(&res);
    };
    export("attn_a");
    export("attn_b");
    // 2 layers x 2 heads CSVs plus blob and index
    let a_dir = dir.path().join("attn_a");
    let names: Vec<String> = {
        let mut v: Vec<String> = std::fs::read_dir(&a_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names.len(), 2 * 2 + 2);
    assert!(names.contains(&"attn.bin".to_string()));
    assert!(names.contains(&"index.json".to_string()));

    // revalidate stochasticity from the exported files
    for name in &names {
        if !name.ends_with(".csv") {
            continue;
        }
        let body = std::fs::read_to_string(a_dir.join(name)).unwrap();
        assert_eq!(body.lines().count(), 17);
        for line in body.lines() {
            let sum: f64 = line.split(',').map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "{name}: row sums to {sum}");
        }
    }

    // re-export produces identical bytes
    for name in &names {
        let a = std::fs::read(a_dir.join(name)).unwrap();
        let b = std::fs::read(dir.path().join("attn_b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between exports");
    }

    // blob length matches the declared layout
    let blob = std::fs::read(a_dir.join("attn.bin")).unwrap();
    assert_eq!(blob.len(), 2 * 2 * 17 * 17 * 4);
}

#[test]
fn exit_codes_match_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    // missing checkpoint: runtime failure
    let out = run(&["eval", "--ckpt", "missing.rvt", "--data", "synthetic"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.rvt"));

    // unknown flag: usage error
    let out = run(&["train", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // bad value for a known flag: usage error
    let out = run(
        &["eval", "--ckpt", "x.rvt", "--data", "synthetic", "--perturb", "scale:99"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // unknown key in the JSON config: validation failure
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "modle": {} }"#).unwrap();
    let out = run(
        &["train", "--config", cfg.to_str().unwrap(), "--data", "synthetic", "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

/// The CIFAR binary directory path works end to end through train and eval.
#[test]
fn cifar_directory_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("cifar");
    std::fs::create_dir_all(&data_dir).unwrap();
    // six tiny batches in the standard record format, 10-class labels
    for i in 1..=5 {
        let ds = revit::data::synthetic_dataset(i, 24, 10, 4, 32).unwrap();
        revit::data::write_cifar_batch(&ds, &data_dir.join(format!("data_batch_{i}.bin")))
            .unwrap();
    }
    let test_ds = revit::data::synthetic_dataset(99, 24, 10, 4, 32).unwrap();
    revit::data::write_cifar_batch(&test_ds, &data_dir.join("test_batch.bin")).unwrap();

    let cfg = dir.path().join("cifar.json");
    std::fs::write(
        &cfg,
        r#"{
          "model": {
            "image_size": 32, "patch_size": 8, "dim": 16, "depth": 1, "heads": 2,
            "mlp_ratio": 2, "num_classes": 10, "variant": "revit",
            "alpha_mode": "shared", "seed": 1
          },
          "train": {
            "epochs": 1, "batch_size": 32, "base_lr": 0.003, "warmup_epochs": 1,
            "weight_decay": 0.0, "grad_clip_norm": 5.0, "seed": 1, "schedule": "cosine"
          }
        }"#,
    )
    .unwrap();
    let data = data_dir.to_string_lossy().into_owned();
    let out = run(
        &["train", "--config", cfg.to_str().unwrap(), "--data", &data, "--out", "cifar_run"],
        dir.path(),
    );
    assert_ok(&out);
    let ckpt = dir.path().join("cifar_run/best.rvt");
    assert!(ckpt.exists());
    let eval = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", &data], dir.path());
    assert_ok(&eval);
    assert!(stdout(&eval).starts_with("top1="));
}

/// Results are reduced in sample order, so the worker count must not change
/// any output.
#[test]
fn training_is_thread_count_independent() {
    let run_with_threads = |threads: &str| -> String {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), TINY_CONFIG);
        let out = Command::new(bin())
            .args(["train", "--config", &cfg, "--data", "synthetic", "--out", "run"])
            .env("REVIT_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .expect("spawn revit");
        assert_ok(&out);
        std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap()
    };
    let single = run_with_threads("1");
    let multi = run_with_threads("3");
    assert_eq!(single, multi, "metrics must not depend on REVIT_THREADS");
}
