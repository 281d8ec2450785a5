//! End-to-end checks of the `cade` binary: exit codes, run-directory
//! conventions, determinism through the CLI, and the crossval bookkeeping
//! identity.

use std::path::Path;
use std::process::Command;

fn cade() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cade"))
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// Tiny end-to-end config: 8 time-points, 6 slices, 32x64 in-plane, a
/// skeletal network. Everything the crossval test needs to run in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    write_json(
        &path,
        &serde_json::json!({
            "network": {
                "input_channels": 4,
                "stem_channels": 4,
                "pyramid_channels": 8,
                "subnet_channels": 4,
                "subnet_depth": 1,
                "anchors": {"base_sizes": [6.0, 12.0, 24.0, 48.0, 96.0]}
            },
            "train": {"epochs": 1, "batch_size": 4},
            "preprocess": {"window_len": 4, "crop_size": 16, "registration": "identity"},
            "phantom": {"shape": [8, 6, 32, 32], "contrast_arrival": 2,
                         "noise_sigma": 2.0, "lesion_count_weights": [0.3, 0.7]},
            "evaluation": {"samples": 20}
        }),
    );
    path
}

#[test]
fn phantom_generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    for name in ["a", "b"] {
        let status = cade()
            .args(["phantom", "generate", "--n", "4", "--seed", "1"])
            .arg("--out")
            .arg(dir.path().join(name))
            .arg("--config")
            .arg(&config)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for rel in
        ["corpus.json", "annotations.jsonl", "cases.json", "studies/s0001/series.f32", "studies/s0003/series.json"]
    {
        let a = std::fs::read(dir.path().join("a").join(rel)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs");
    }
}

#[test]
fn evaluate_perfect_fixture_reaches_one_at_zero_fp() {
    let dir = tempfile::tempdir().unwrap();
    // Two studies: one lesion on s0_L, hit exactly; s1 entirely normal.
    write_json(
        &dir.path().join("cases.json"),
        &serde_json::json!({"cases": [
            {"study_id": "s0", "breast_ids": ["s0_L", "s0_R"]},
            {"study_id": "s1", "breast_ids": ["s1_L", "s1_R"]}
        ]}),
    );
    std::fs::write(
        dir.path().join("annotations.jsonl"),
        r#"{"min":[1,2,3],"max":[5,8,9],"category":"malignant","breast_id":"s0_L"}"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("detections.jsonl"),
        r#"{"min":[1,2,3],"max":[5,8,9],"score":0.99,"breast_id":"s0_L"}"#,
    )
    .unwrap();

    let out = dir.path().join("eval");
    let output = cade()
        .arg("evaluate")
        .arg("--dets")
        .arg(dir.path().join("detections.jsonl"))
        .arg("--annotations")
        .arg(dir.path().join("annotations.jsonl"))
        .arg("--cases")
        .arg(dir.path().join("cases.json"))
        .args(["--metric", "detection-rate", "--samples", "0"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let curve: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run-0001/curve.json")).unwrap())
            .unwrap();
    let points = curve["points"].as_array().unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(points[0]["fp_per_normal_breast"], 0.0);
    assert_eq!(points[0]["value"], 1.0);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run-0001/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["cpm"], 1.0);
}

#[test]
fn crossval_three_folds_with_bookkeeping_identity() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    let status = cade()
        .args(["phantom", "generate", "--n", "12", "--seed", "7"])
        .arg("--out")
        .arg(&corpus)
        .arg("--config")
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());

    let prep = dir.path().join("prep");
    let status = cade()
        .arg("preprocess")
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(&prep)
        .arg("--config")
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());

    let out = dir.path().join("cv");
    let output = cade()
        .arg("crossval")
        .arg("--corpus")
        .arg(&prep)
        .args(["--folds", "3", "--seed", "5"])
        .arg("--out")
        .arg(&out)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let run = out.join("run-0001");
    assert!(run.join("config.resolved.json").exists());
    assert!(run.join("run.log").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let folds = summary["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 3);
    for fi in 0..3 {
        assert!(run.join(format!("fold-{fi}/report.json")).exists());
        assert!(run.join(format!("fold-{fi}/detections.jsonl")).exists());
    }
    // Pooled matched-lesion count equals the sum over folds.
    let per_fold: u64 = folds.iter().map(|f| f["matched_lesions"].as_u64().unwrap()).sum();
    assert_eq!(summary["pooled_matched_lesions"].as_u64().unwrap(), per_fold);
    // Every study is tested exactly once, so lesion totals add up too.
    let per_fold_total: u64 = folds.iter().map(|f| f["total_lesions"].as_u64().unwrap()).sum();
    assert_eq!(summary["pooled_total_lesions"].as_u64().unwrap(), per_fold_total);
}

#[test]
fn bad_config_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    let output = cade()
        .args(["phantom", "generate", "--n", "1", "--seed", "1"])
        .arg("--out")
        .arg(dir.path().join("x"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().next().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line).expect("machine-parsable error");
    assert!(parsed["error"].as_str().unwrap().contains("learning_rat"));
}

#[test]
fn missing_input_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let output = cade()
        .arg("evaluate")
        .arg("--dets")
        .arg(dir.path().join("nope.jsonl"))
        .arg("--annotations")
        .arg(dir.path().join("nope2.jsonl"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn reruns_get_fresh_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    write_json(
        &dir.path().join("cases.json"),
        &serde_json::json!({"cases": [{"study_id": "s0", "breast_ids": ["s0_L", "s0_R"]}]}),
    );
    std::fs::write(
        dir.path().join("annotations.jsonl"),
        r#"{"min":[1,2,3],"max":[5,8,9],"category":"malignant","breast_id":"s0_L"}"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("detections.jsonl"),
        r#"{"min":[1,2,3],"max":[5,8,9],"score":0.9,"breast_id":"s0_L"}"#,
    )
    .unwrap();
    let out = dir.path().join("eval");
    for _ in 0..2 {
        let status = cade()
            .arg("evaluate")
            .arg("--dets")
            .arg(dir.path().join("detections.jsonl"))
            .arg("--annotations")
            .arg(dir.path().join("annotations.jsonl"))
            .arg("--cases")
            .arg(dir.path().join("cases.json"))
            .args(["--samples", "0"])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert!(out.join("run-0001/curve.json").exists());
    assert!(out.join("run-0002/curve.json").exists());
}

#[test]
fn phantom_refuses_to_overwrite_nonempty_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("corpus");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "important").unwrap();
    let output = cade()
        .args(["phantom", "generate", "--n", "1", "--seed", "1"])
        .arg("--out")
        .arg(&out)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert_eq!(std::fs::read_to_string(out.join("keep.txt")).unwrap(), "important");
}

#[test]
fn compare_of_identical_runs_gives_p_one() {
    let dir = tempfile::tempdir().unwrap();
    // Build a minimal self-contained run directory.
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    write_json(
        &run.join("cases.json"),
        &serde_json::json!({"cases": [
            {"study_id": "s0", "breast_ids": ["s0_L", "s0_R"]},
            {"study_id": "s1", "breast_ids": ["s1_L", "s1_R"]}
        ]}),
    );
    std::fs::write(
        run.join("annotations.jsonl"),
        r#"{"min":[1,2,3],"max":[5,8,9],"category":"malignant","breast_id":"s0_L"}"#,
    )
    .unwrap();
    std::fs::write(
        run.join("detections.jsonl"),
        concat!(
            r#"{"min":[1,2,3],"max":[5,8,9],"score":0.95,"breast_id":"s0_L"}"#,
            "\n",
            r#"{"min":[0,0,0],"max":[3,3,3],"score":0.2,"breast_id":"s1_R"}"#
        ),
    )
    .unwrap();

    let output = cade()
        .arg("compare")
        .arg("--run-a")
        .arg(&run)
        .arg("--run-b")
        .arg(&run)
        .args(["--metric", "detection-rate", "--samples", "200", "--seed", "9"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let result: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&output.stdout).trim()).unwrap();
    assert_eq!(result["p"], 1.0);
    assert_eq!(result["significant"], false);
}
