use std::path::Path;
use std::process::{Command, Output};

fn fundus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fundus")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

// 16-pixel models and a handful of epochs: fast, not meant to be good
const TINY: &str = r#"{
  "data": {"count": 24, "size": 32, "split": [0.5, 0.2, 0.3]},
  "readability": {"input_size": 16, "arch": "plain_cnn", "width": 2, "epochs": 1, "batch_size": 8},
  "restorer": {
    "image_size": 16, "epochs": 1, "batch_size": 8,
    "schedule": {"steps": 4},
    "denoiser": {"backbone": "unet", "width": 2, "time_dim": 4},
    "extractor": {"width": 2, "attention": {"embed_dim": 8, "heads": 2}}
  },
  "experiments": {"eval_limit": 2}
}"#;

#[test]
fn config_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let unknown = write_config(dir.path(), "bad.json", r#"{"restorer": {"epoch": 2}}"#);
    let r = fundus(&["gen-data", "--config", &unknown, "--out", out]);
    assert_eq!(code(&r), 2, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("epoch"));

    let bad_strategy = write_config(dir.path(), "fusion.json", r#"{"restorer": {"fusion": {"strategy": "nearest"}}}"#);
    assert_eq!(code(&fundus(&["compare-fusion", "--config", &bad_strategy, "--out", out])), 2);

    let missing = dir.path().join("nope.json");
    assert_eq!(code(&fundus(&["gen-data", "--config", missing.to_str().unwrap(), "--out", out])), 2);
    // usage errors from the argument parser
    assert_eq!(code(&fundus(&["gen-data", "--seed", "x"])), 2);
    assert_eq!(code(&fundus(&["frobnicate"])), 2);
}

#[test]
fn runtime_problems_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("no-corpus");
    let r = fundus(&["train-restorer", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 3);
}

#[test]
fn full_workflow_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let data = dir.path().join("data");
    let models = dir.path().join("models");
    let results = dir.path().join("results");
    let (data_s, models_s, results_s) = (data.to_str().unwrap(), models.to_str().unwrap(), results.to_str().unwrap());
    let ok = |args: &[&str]| {
        let r = fundus(args);
        assert_eq!(code(&r), 0, "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        String::from_utf8(r.stdout).unwrap()
    };

    ok(&["gen-data", "--config", &cfg, "--seed", "3", "--out", data_s]);
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 24);
    assert!(data.join("split.json").exists());

    ok(&["train-readability", "--config", &cfg, "--seed", "3", "--data", data_s, "--out", models_s]);
    ok(&["train-restorer", "--config", &cfg, "--seed", "3", "--data", data_s, "--out", models_s]);
    for f in ["readability.rrgn", "restorer.rrgn", "restorer_history.csv", "readability_history.csv", "readability_report.json"] {
        assert!(models.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(models.join("restorer_history.csv")).unwrap();
    assert_eq!(history.lines().collect::<Vec<_>>().len(), 2);
    assert_eq!(history.lines().next(), Some("epoch,loss"));

    let cls = models.join("readability.rrgn");
    let rst = models.join("restorer.rrgn");
    ok(&[
        "restore", "--config", &cfg, "--seed", "3", "--data", data_s, "--out", results_s,
        "--classifier", cls.to_str().unwrap(), "--restorer", rst.to_str().unwrap(),
    ]);
    let metrics = std::fs::read_to_string(results.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("id,psnr,ssim,lpips"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(results.join("restore_report.json")).unwrap()).unwrap();
    let n = report["images"].as_u64().unwrap();
    assert_eq!(metrics.lines().count() as u64, n + 1);
    assert_eq!(report["results"].as_array().unwrap().len() as u64, n);
    assert_eq!(std::fs::read_dir(results.join("restored")).unwrap().count() as u64, n);

    ok(&["evaluate", "--config", &cfg, "--seed", "3", "--data", data_s, "--out", results_s, "--classifier", cls.to_str().unwrap()]);
    assert!(results.join("roc_optic_disc.csv").exists());

    // a configuration asking for another T no longer matches the model
    let other_t = write_config(dir.path(), "t8.json", &TINY.replace(r#""steps": 4"#, r#""steps": 8"#));
    let r = fundus(&[
        "restore", "--config", &other_t, "--seed", "3", "--data", data_s, "--out", results_s,
        "--classifier", cls.to_str().unwrap(), "--restorer", rst.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("T = 4"));
}

#[test]
fn compare_fusion_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let out = dir.path().join("cmp");
    let r = fundus(&["compare-fusion", "--config", &cfg, "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("compare_fusion.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,psnr,ssim,lpips,reference_psnr,reference_ssim,reference_lpips");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("upsample_static,"));
    assert!(out.join("compare_fusion_report.json").exists());
}
