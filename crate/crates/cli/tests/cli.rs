use std::fs;
use std::path::Path;
use std::process::Command;

fn tumorseg(ws: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_tumorseg"))
        .args(args)
        .arg("--output-dir")
        .arg(ws)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "tumorseg {args:?} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

#[test]
fn full_pipeline_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ws = tmp.path().join("ws");
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "schema_version = 1\n[cross_validation]\nfolds = 2\nseed = 3\n").unwrap();
    let c = cfg.to_str().unwrap();
    let d = data.to_str().unwrap();

    let out = tumorseg(&ws, &["prepare", "--synthetic", "6", "--synthetic-size", "24", "--data-root", d, "--config", c]);
    assert_eq!(out.lines().count(), 2, "{out}");
    let common = ["--config", c, "--variant", "ds", "--desk-scale"];
    let step = |cmd: &str| {
        let mut v = vec![cmd];
        v.extend(common);
        tumorseg(&ws, &v)
    };
    step("train");
    assert!(ws.join("runs/ds/fold1/history.jsonl").exists());
    step("infer");
    let out = step("postprocess-tune");
    assert!(out.contains("mean Dice"), "{out}");
    let table = step("evaluate");
    assert!(table.contains("DS") && table.contains("Fold 1"), "{table}");
    assert!(ws.join("tables/table.txt").exists());
    assert_eq!(fs::read_to_string(ws.join("metrics/ds.jsonl")).unwrap().lines().count(), 12);
    step("render-slices");
    let pngs = fs::read_dir(ws.join("slices/ds")).unwrap().count();
    assert_eq!(pngs, 6);
}

#[test]
fn rejects_unknown_variant_and_device() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [vec!["train", "--variant", "unet3plus"], vec!["train", "--device", "cuda"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_tumorseg"))
            .args(&args)
            .arg("--output-dir")
            .arg(tmp.path())
            .output()
            .unwrap();
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}
