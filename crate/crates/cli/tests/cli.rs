use std::path::Path;
use std::process::{Command, Output};

use vcnet_core::io::{read_mask, read_volume, write_mask, write_volume};
use vcnet_core::{VesselMask, Volume3D};

fn vcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcnet")).args(args).env_remove("VCNET_DATA_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vcnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    let help = vcnet(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["phantom", "mip", "train", "finetune", "infer", "eval", "baseline", "serve"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(vcnet(&["mip", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(vcnet(&["bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = vcnet(&["mip", "--input", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("error[io]: ")), "{err}");

    let out = vcnet(&["train", "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]: "));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"modle": {}}"#).unwrap();
    let out = vcnet(&["--config", s(&cfg), "mip", "--input", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]: "));
}

#[test]
fn mip_writes_one_png_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let data = (0..8 * 6 * 16).map(|i| (i % 17) as f32).collect();
    let vol = Volume3D::new([8, 6, 16], [1.0; 3], data).unwrap();
    let input = write_volume(&vol, dir.path().join("v")).unwrap();
    let out = dir.path().join("mips");
    let printed = ok(&["mip", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(printed.trim(), "6");
    for k in 0..6 {
        let png = out.join(format!("mip_{k:02}.png"));
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&png).unwrap()));
        let info = decoder.read_info().unwrap().info().clone();
        assert_eq!((info.width, info.height), (6, 8));
        assert!(out.join(format!("mip_{k:02}_index.vkv.json")).exists());
    }
    assert!(!out.join("mip_06.png").exists());
}

#[test]
fn eval_hand_case_prints_row() {
    let dir = tempfile::tempdir().unwrap();
    // TP 3, FP 1, FN 2, TN 4.
    let pred = VesselMask::new([10, 1, 1], vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]).unwrap();
    let gt = VesselMask::new([10, 1, 1], vec![1, 1, 1, 0, 1, 1, 0, 0, 0, 0]).unwrap();
    let p = write_mask(&pred, dir.path().join("case_pred")).unwrap();
    let g = write_mask(&gt, dir.path().join("case_gt")).unwrap();
    let csv = ok(&["eval", "--pred", s(&p), "--gt", s(&g)]);
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("case_pred,0.666667,0.750000,0.200000"), "{csv}");
    let jsonl = ok(&["eval", "--pred", s(&p), "--gt", s(&g), "--format", "jsonl"]);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert!((first["precision"].as_f64().unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn threshold_baseline_counts_voxels() {
    let dir = tempfile::tempdir().unwrap();
    let vol = Volume3D::new([4, 4, 2], [1.0; 3], (0..32).map(|i| i as f32).collect()).unwrap();
    let input = write_volume(&vol, dir.path().join("v")).unwrap();
    let out = dir.path().join("m");
    assert_eq!(ok(&["baseline", "threshold", "--input", s(&input), "--tau", "20", "--out", s(&out)]).trim(), "12");
    assert_eq!(read_mask(&out).unwrap().count(), 12);
}

const TINY_MODEL: &[&str] = &[
    "--patch", "8,8,16", "--base-width", "2", "--depth-3d", "2", "--depth-2d", "2",
    "--epochs", "1", "--patches-per-case", "2", "--batch-size", "2", "--val-fraction", "0",
];

fn make_phantoms(dir: &Path, seed: &str) {
    ok(&["--seed", seed, "phantom", "--out", s(dir), "--count", "2", "--dims", "16,16,16", "--vessels", "2"]);
}

#[test]
fn phantom_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_phantoms(&data, "5");
    for name in ["phantom_000.vkv.json", "phantom_000_mask.vkv.json", "phantom_001_centerlines.json"] {
        assert!(data.join(name).exists(), "{name} missing");
    }
    let model = dir.path().join("model");
    let log = dir.path().join("log.jsonl");
    let mut args = vec!["--seed", "5", "train", "--data", s(&data), "--out", s(&model), "--log-file", s(&log)];
    args.extend_from_slice(TINY_MODEL);
    ok(&args);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1);

    let pred = dir.path().join("pred");
    let probs = dir.path().join("probs");
    let input = data.join("phantom_001.vkv.json");
    ok(&["infer", "--checkpoint", s(&model), "--input", s(&input), "--out", s(&pred), "--probabilities", s(&probs)]);
    assert_eq!(read_mask(&pred).unwrap().dims(), [16, 16, 16]);
    let p = read_volume(&probs).unwrap();
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let report = ok(&["eval", "--checkpoint", s(&model), "--data", s(&data)]);
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[1].starts_with("phantom_000,") && lines[2].starts_with("phantom_001,"), "{report}");

    // Data directory from the environment; zero epochs keep the weights.
    let tuned = dir.path().join("tuned");
    let out = Command::new(env!("CARGO_BIN_EXE_vcnet"))
        .args(["finetune", "--checkpoint", s(&model), "--out", s(&tuned), "--epochs", "0"])
        .env("VCNET_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bin = |p: &Path| std::fs::read(p.with_extension("ckpt.bin")).unwrap();
    assert_eq!(bin(&model), bin(&tuned));
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str, seed: &str| {
        let data = dir.path().join(format!("data_{tag}"));
        make_phantoms(&data, seed);
        let model = dir.path().join(format!("model_{tag}"));
        let mut args = vec!["--seed", seed, "--threads", "1", "train", "--data", s(&data), "--out", s(&model)];
        args.extend_from_slice(TINY_MODEL);
        ok(&args);
        (std::fs::read(data.join("phantom_000.vkv.raw")).unwrap(), std::fs::read(model.with_extension("ckpt.bin")).unwrap())
    };
    let (a, b, c) = (run("a", "11"), run("b", "11"), run("c", "12"));
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert_ne!(a.1, c.1);
}
