//! The `cxscale` binary driven as a user would: artifacts, manifests,
//! reproducibility and error reporting.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--grid", "4", "--tile-px", "8", "--dim", "8", "--text-dim", "8", "--blocks", "1",
    "--train-scenes", "32", "--test-scenes", "48", "--sampler-epochs", "40",
    "--stage1-epochs", "2", "--stage2-epochs", "3",
];

fn cxscale(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxscale"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = cxscale(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn failure(out: &Path, args: &[&str]) -> (i32, serde_json::Value) {
    let o = cxscale(out, args);
    assert!(!o.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(o.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    (o.status.code().unwrap(), serde_json::from_str(line).expect("one JSON error line"))
}

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_stage(out: &Path, command: &str, extra: &[&'static str]) -> String {
    let mut args = vec![command.to_string()];
    args.extend(with(SMALL, extra));
    ok(out, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn generated_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(out, &["gen-data", "--scenes", "8", "--test-scenes", "4", "--seed", "7"]);
    }
    for name in ["train.cxsd", "test.cxsd"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("gen-data.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["train_scenes"], 8);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn staged_pipeline_runs_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for command in ["gen-data", "make-supervision", "train-sampler", "train-predictor", "calibrate", "train-align", "evaluate"] {
        run_stage(out, command, &[]);
    }
    for artifact in [
        "supervision-train.cxsg",
        "supervision-test.cxsg",
        "sampler.json",
        "sampler.bin",
        "predictor.json",
        "predictor.bin",
        "head.json",
        "head.bin",
        "calibration.json",
        "evaluation.json",
    ] {
        assert!(out.join(artifact).exists(), "{artifact} missing");
    }
    let calibration: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("calibration.json")).unwrap()).unwrap();
    let evaluation: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("evaluation.json")).unwrap()).unwrap();
    // evaluation picks up the calibrated threshold
    assert_eq!(calibration["tau"], evaluation["threshold"]);
    let realized = evaluation["report"]["realized_obr_mean"].as_f64().unwrap();
    assert!((realized - 0.15).abs() <= 0.05, "held-out OBR {realized}");

    let first = fs::read(out.join("evaluation.json")).unwrap();
    run_stage(out, "evaluate", &[]);
    assert_eq!(fs::read(out.join("evaluation.json")).unwrap(), first);

    let sweep_one = run_stage(out, "sweep", &["--workers", "1"]);
    let csv_one = fs::read(out.join("sweep.csv")).unwrap();
    run_stage(out, "sweep", &["--workers", "4"]);
    assert_eq!(fs::read(out.join("sweep.csv")).unwrap(), csv_one);
    let thresholds: Vec<&str> = sweep_one.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(thresholds, ["0.00", "0.10", "0.25", "0.45", "0.55", "0.65", "0.85", "1.00"]);

    // an explicit threshold overrides the calibrated one
    run_stage(out, "evaluate", &["--threshold", "1.0"]);
    let pinned: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(pinned["threshold"], 1.0);
    assert_eq!(pinned["report"]["realized_obr_mean"], 0.0);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("evaluate.manifest.json")).unwrap()).unwrap();
    let inputs: Vec<&str> = manifest["inputs"].as_array().unwrap().iter().map(|i| i["path"].as_str().unwrap()).collect();
    assert!(inputs.iter().any(|p| p.ends_with("head.json")) && inputs.iter().any(|p| p.ends_with("test.cxsd")));
    assert!(manifest["wall_ms"].is_u64() && manifest["config_digest"].is_string());
}

#[test]
fn failures_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let (code, err) = failure(out, &["evaluate"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "missing_file"));

    let cfg = out.join("bad.cfg");
    fs::write(&cfg, "grid = 4\ntile_pixels = 8\n").unwrap();
    let (code, err) = failure(out, &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!((code, err["error"].as_str().unwrap()), (4, "config"));
    assert!(err["message"].as_str().unwrap().contains("tile_pixels"));

    let (code, _) = failure(out, &["gen-data", "--grid", "three"]);
    assert_eq!(code, 4);
    let (code, _) = failure(out, &["gen-data", "--target-obr", "1.5"]);
    assert_eq!(code, 4);
    let (code, err) = failure(out, &["gen-data", "--gird", "4"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "usage"));

    ok(out, &["gen-data", "--grid", "4", "--tile-px", "8", "--train-scenes", "4", "--test-scenes", "2"]);
    let (code, err) = failure(out, &["make-supervision", "--grid", "2", "--tile-px", "8"]);
    assert_eq!((code, err["error"].as_str().unwrap()), (5, "mismatch"));

    fs::write(out.join("sampler.json"), "{\"kind\":\"head\",\"blob\":\"sampler.bin\",\"meta\":null,\"tensors\":[]}").unwrap();
    fs::write(out.join("sampler.bin"), b"").unwrap();
    let (code, _) = failure(out, &["calibrate", "--grid", "4", "--tile-px", "8"]);
    assert_eq!(code, 5);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("run.cfg");
    fs::write(&cfg, "# small run\ngrid = 4\ntile_px = 8\ntrain_scenes = 3 # tiny\ntest_scenes = 2\n").unwrap();
    ok(out, &["gen-data", "--config", cfg.to_str().unwrap(), "--train-scenes", "5"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("gen-data.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["grid"], 4);
    assert_eq!(manifest["config"]["train_scenes"], 5);
    assert!(manifest["config_text"].as_str().unwrap().contains("train_scenes = 5"));
}

#[test]
fn gradcheck_reports_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck"]);
    for name in ["primitive.matmul", "loss_rep", "loss_siglip", "stage_one_loss.full"] {
        assert!(stdout.contains(name), "{name} missing from\n{stdout}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["components"].as_array().unwrap().iter().all(|c| c["max_rel_error"].as_f64().unwrap() < 1e-4));
}
