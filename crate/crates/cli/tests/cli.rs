mod common;

use std::fs;
use std::path::Path;

use common::{lungseg, ok, run_pipeline, snapshot, with_config};

#[test]
fn pipeline_reruns_are_bit_identical() {
    let root = tempfile::tempdir().unwrap();
    run_pipeline(root.path());
    let first = snapshot(root.path());
    for f in [
        "out/checkpoint.ldck",
        "out/metrics.ndjson",
        "out/phantom/manifest.json",
        "out/segment/test_000_labels.nii.gz",
        "out/segment/test_000_features.bin",
        "out/generate/gen_000.nii.gz",
        "out/evaluate/table.csv",
        "out/plots/loss.png",
        "out/plots/slices.png",
        "out/train_config.json",
    ] {
        assert!(first.contains_key(Path::new(f)), "missing {f}");
    }
    run_pipeline(root.path());
    let second = snapshot(root.path());
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (k, v) in &first {
        assert!(second[k] == *v, "{} changed between runs", k.display());
    }
}

#[test]
fn artifacts_carry_the_config_hash() {
    let root = tempfile::tempdir().unwrap();
    run_pipeline(root.path());
    let out = root.path().join("out");
    let resolved: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("segment_config.json")).unwrap()).unwrap();
    let hash = resolved["config_hash"].as_str().unwrap().to_string();
    let training = resolved["training_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 16);

    let desc = lungseg_core::io::description(&out.join("segment/test_000_labels.nii.gz"))
        .unwrap()
        .unwrap();
    assert!(desc.contains(&hash), "{desc}");
    let desc = lungseg_core::io::description(&out.join("phantom/test_000_ct.nii.gz"))
        .unwrap()
        .unwrap();
    assert!(desc.starts_with("lungseg config "));

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("segment/test_000_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config_hash"], hash.as_str());

    let metrics = fs::read_to_string(out.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"], training.as_str());
        assert!(v["l_diff"].as_f64().unwrap().is_finite());
    }
    let ck = lungseg_core::checkpoint::Checkpoint::load(&out.join("checkpoint.ldck")).unwrap();
    assert_eq!(ck.config_hash, training);

    let table = fs::read_to_string(out.join("evaluate/table.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().ends_with(&hash), "{table}");
    let png = fs::read(out.join("plots/loss.png")).unwrap();
    assert!(png.windows(hash.len()).any(|w| w == hash.as_bytes()));
}

#[test]
fn hash_mismatch_is_refused_unless_overridden() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &with_config("train", &[]));
    ok(root.path(), &with_config("segment", &[]));

    let out = lungseg(
        root.path(),
        &with_config("segment", &["--set", "train.lr=0.5"]),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("segment") && err.contains("hash mismatch"),
        "{err}"
    );

    let out = lungseg(
        root.path(),
        &with_config("generate", &["--set", "model.groups=1"]),
    );
    assert_eq!(out.status.code(), Some(1));

    ok(
        root.path(),
        &with_config(
            "segment",
            &["--set", "train.lr=0.5", "--allow-hash-mismatch"],
        ),
    );
    // Segmentation-only settings do not touch the training hash.
    ok(
        root.path(),
        &with_config("segment", &["--set", "segment.alpha_s=0.5"]),
    );
}

#[test]
fn evaluate_identical_labels_scores_one() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &with_config("phantom", &[]));
    let labels = root.path().join("out/phantom/test_000_labels.nii.gz");
    let list = format!("[{:?}]", labels.display().to_string());
    let preds = format!("data.predictions={list}");
    let gts = format!("data.labels={list}");
    ok(
        root.path(),
        &with_config("evaluate", &["--set", &preds, "--set", &gts]),
    );
    let report: lungseg_core::MetricReport = serde_json::from_slice(
        &fs::read(root.path().join("out/evaluate/test_000_labels_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.classes.len(), 4);
    for c in &report.classes {
        assert_eq!(c.dice, 1.0, "{:?}", c.label);
        assert_eq!(c.hd95, Some(0.0));
    }
    assert_eq!(report.mean_dice, 1.0);
}

#[test]
fn ablate_emits_six_rows_in_order() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &with_config("ablate", &[]));
    let csv = fs::read_to_string(root.path().join("out/ablate/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7, "{csv}");
    assert!(
        lines[0].starts_with("row,hu_preserved,distillation,warmup,multi_timestep,fusion,dsc,hd95")
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(root.path().join("out/ablate/ablation.json")).unwrap())
            .unwrap();
    let marks: Vec<[bool; 5]> = doc["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let r = &r["row"];
            [
                "hu_preserved",
                "distillation",
                "warmup",
                "multi_timestep",
                "fusion",
            ]
            .map(|k| r[k].as_bool().unwrap())
        })
        .collect();
    let (y, n) = (true, false);
    assert_eq!(
        marks,
        vec![
            [n, n, n, n, n],
            [y, n, n, n, n],
            [y, y, n, n, n],
            [y, y, y, n, n],
            [y, y, y, y, n],
            [y, y, y, y, y],
        ]
    );
    assert!(
        lines[1].starts_with("\"Baseline (8-bit, no distil.)\""),
        "{}",
        lines[1]
    );
}

#[test]
fn user_errors_exit_with_one() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let code = |args: &[&str]| lungseg(r, args).status.code();
    assert_eq!(code(&["train", "--config", "/nonexistent.toml"]), Some(1));
    assert_eq!(
        code(&with_config("train", &["--set", "train.nope=1"])),
        Some(1)
    );
    assert_eq!(code(&with_config("segment", &[])), Some(1));
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
    let out = lungseg(r, &with_config("plot", &[]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("plot"));
}

#[test]
fn shipped_tiny_config_matches_the_benchmark_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let cfg = lungseg_core::ExperimentConfig::load(&path).unwrap();
    let preset = lungseg_core::benchmark::tiny_config(200);
    assert_eq!(cfg.training_hash(), preset.training_hash());
    assert_eq!(cfg.inference, preset.inference);
    assert_eq!(cfg.segment, preset.segment);
}
