use std::path::Path;
use std::process::{Command, Output};

use hyspark::mask::{upsample_mask, MaskDump};
use hyspark::volume::{load_volume, Sidecar};

fn hyspark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyspark")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: &str) {
    let out = hyspark(&["gen-data", "--out", p(dir), "--count", count, "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn gen_data_is_deterministic_and_indexed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "3");
    gen(&b, "3");
    let names = sorted_files(&a);
    assert_eq!(names.iter().filter(|n| n.ends_with(".raw")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.ends_with(".json")).count(), 7);
    assert_eq!(names, sorted_files(&b));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let index: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("index.json")).unwrap()).unwrap();
    for item in index["items"].as_array().unwrap() {
        let raw = item["volume"].as_str().unwrap().replace(".raw", ".json");
        let side: Sidecar = serde_json::from_slice(&std::fs::read(a.join(raw)).unwrap()).unwrap();
        let shape: Vec<usize> = serde_json::from_value(item["shape"].clone()).unwrap();
        assert_eq!(side.shape.to_vec(), shape);
    }
}

#[test]
fn bad_arguments_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "1");
    let ckpt = tmp.path().join("x.ckpt");
    let out = hyspark(&["pretrain", "--data", p(&data), "--mask-ratio", "1.0", "--steps", "1", "--out", p(&ckpt)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask_ratio"));
    assert!(!ckpt.exists());

    let out = hyspark(&["ablate", "--arm", "ratio90", "--data", p(&data), "--out", p(tmp.path())]);
    assert_eq!(code(&out), 2);

    let missing = tmp.path().join("missing.ckpt");
    let out = hyspark(&["finetune", "--ckpt", p(&missing), "--data", p(&data), "--out", p(&ckpt)]);
    assert_eq!(code(&out), 2);
    let vol = data.join("phantom_000.raw");
    let out = hyspark(&["reconstruct", "--ckpt", p(&missing), "--volume", p(&vol), "--out", p(tmp.path())]);
    assert_eq!(code(&out), 2);

    let out = hyspark(&["verify", "--suite", "everything"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn pretrain_reconstruct_finetune_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "2");
    let ckpt = tmp.path().join("pre.ckpt");
    let log = tmp.path().join("pre.ndjson");
    let out = hyspark(&[
        "pretrain", "--data", p(&data), "--steps", "3", "--batch-size", "1", "--out", p(&ckpt), "--log", p(&log),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 3);
    for line in lines.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
    }
    assert!(tmp.path().join("pre.ndjson.config.toml").exists());

    let vol = data.join("phantom_001.raw");
    for ratio in ["0.75", "0"] {
        let rec = tmp.path().join(format!("rec{ratio}"));
        let out = hyspark(&[
            "reconstruct", "--ckpt", p(&ckpt), "--volume", p(&vol), "--mask-ratio", ratio, "--out", p(&rec),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let input = load_volume(&rec.join("input.raw")).unwrap();
        let masked = load_volume(&rec.join("masked.raw")).unwrap();
        let pred = load_volume(&rec.join("prediction.raw")).unwrap();
        assert_eq!(input.shape(), masked.shape());
        assert_eq!(input.shape(), pred.shape());
        assert!(pred.values().iter().all(|v| v.is_finite()));
        let dump = MaskDump::from_json(&std::fs::read_to_string(rec.join("mask.json")).unwrap()).unwrap();
        let junction = dump.decode().unwrap();
        let voxel = upsample_mask(&junction, input.shape()[0] / junction.shape()[0]);
        for ((&x, &m), &on) in input.values().iter().zip(masked.values()).zip(voxel.bits()) {
            assert_eq!(m.to_bits(), if on { x } else { 0.0 }.to_bits());
        }
        if ratio == "0" {
            assert_eq!(masked.values(), input.values());
        }
    }

    let seg = tmp.path().join("seg.ckpt");
    let out = hyspark(&[
        "finetune", "--from-checkpoint", p(&ckpt), "--data", p(&data), "--val", p(&data), "--steps", "2",
        "--eval-every", "1", "--batch-size", "1", "--out", p(&seg),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dice = std::fs::read_to_string(tmp.path().join("seg.ckpt.dice.ndjson")).unwrap();
    // Two epochs, each logging a train and a val record.
    assert_eq!(dice.lines().count(), 4);
    for line in dice.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let d = rec["dice"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&d));
    }
    assert!(seg.exists());
}

#[test]
fn verify_reports_each_suite_once() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("verify.json");
    let out = hyspark(&["verify", "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let file: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(stdout, file);
    assert_eq!(file["passed"], true);
    let names: Vec<&str> = file["suites"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["sparse", "grad", "mask", "pipeline"]);

    let out = hyspark(&["verify", "--suite", "mask", "--no-bottom-up"]);
    assert_eq!(code(&out), 1);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
}
