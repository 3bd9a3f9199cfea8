use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bilateral_enhance::data::{load_image, save_image};
use bilateral_enhance::Tensor;
use tempfile::TempDir;

fn bilateral(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilateral")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FIVE: &str = r#"[
    {"kind": "gamma", "params": [0.7]},
    {"kind": "gamma", "params": [1.0]},
    {"kind": "s-curve", "params": [0.5]},
    {"kind": "white-balance", "params": [1.1, 0.9]},
    [{"kind": "gamma", "params": [0.7]}, {"kind": "gain-bias", "params": [0.9, 0.0]}]
]"#;

fn synth(dir: &Path, count: usize, size: usize) -> Vec<PathBuf> {
    let spec = dir.join("experts.json");
    fs::write(&spec, FIVE).unwrap();
    let out = dir.join("data");
    let o = bilateral(&[
        "synth-data", "--seed", "3", "--count", &count.to_string(), "--size", &size.to_string(),
        "--experts", s(&spec), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    stdout(&o).lines().map(PathBuf::from).collect()
}

fn identity_model(dir: &Path) -> PathBuf {
    let path = dir.join("identity.ckpt");
    let o = bilateral(&["identity-model", "--out", s(&path), "--scale", "0.25", "--lowres", "64", "--depth", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    path
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["train", "--bogus"][..],
        &["train", "--out", "x.ckpt"],
        &["infer", "--model", "m"],
        &["gradcheck", "--precision", "single"],
        &["frobnicate"],
        &["train", "--manifest", "m.jsonl", "--out", "x", "--epochs", "0"],
        &["train", "--manifest", "m.jsonl", "--out", "x", "--schedule", "exp", "--gamma", "1.5"],
    ] {
        assert_eq!(code(&bilateral(args)), 2, "{args:?}");
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_bilateral"))
        .args(["gradcheck"])
        .env("BILATERAL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("BILATERAL_THREADS"));
}

#[test]
fn synth_data_counts_and_reproducibility() {
    let dir = TempDir::new().unwrap();
    let manifests = synth(dir.path(), 10, 16);
    assert_eq!(manifests.len(), 5);
    let data = dir.path().join("data");
    assert_eq!(fs::read_dir(data.join("inputs")).unwrap().count(), 10);
    let targets: usize = (0..5).map(|k| fs::read_dir(data.join(format!("synthetic-{k}"))).unwrap().count()).sum();
    assert_eq!(targets, 50);

    let again = TempDir::new().unwrap();
    synth(again.path(), 10, 16);
    for m in &manifests {
        let rel = m.strip_prefix(dir.path()).unwrap();
        assert_eq!(fs::read(m).unwrap(), fs::read(again.path().join(rel)).unwrap());
    }
    for k in 0..10 {
        let name = format!("inputs/{k:05}.ppm");
        assert_eq!(fs::read(data.join(&name)).unwrap(), fs::read(again.path().join("data").join(&name)).unwrap());
    }
}

#[test]
fn bad_expert_spec_exits_two() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, r#"[{"kind": "sepia", "params": [1]}]"#).unwrap();
    let o = bilateral(&["synth-data", "--experts", s(&spec), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sepia"));
    let missing = bilateral(&["synth-data", "--experts", "/nonexistent.json", "--out", s(dir.path())]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn five_manifests_are_combined() {
    let dir = TempDir::new().unwrap();
    let manifests = synth(dir.path(), 3, 16);
    let ckpt = dir.path().join("m.ckpt");
    let metrics = dir.path().join("metrics.csv");
    let mut args = vec!["train"];
    for m in &manifests {
        args.extend(["--manifest", s(m)]);
    }
    args.extend([
        "--epochs", "2", "--batch-size", "4", "--scale", "0.25", "--lowres", "64", "--depth", "4",
        "--out", s(&ckpt), "--metrics", s(&metrics),
    ]);
    let o = bilateral(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("training set: 15 pairs from 5 manifests"), "{}", stderr(&o));
    assert!(ckpt.exists());
    // ceil(15 / 4) = 4 steps per epoch, plus one eval row per epoch.
    let rows = fs::read_to_string(&metrics).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * (4 + 1));
    let lrs: Vec<&str> = rows.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(lrs[0], "0.0001");
    assert!(lrs[9].parse::<f64>().unwrap() < 1e-4);

    let o = bilateral(&["eval", "--model", s(&ckpt), "--manifest", s(&manifests[0]), "--manifest", s(&manifests[4])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("over 6 pairs"));
    assert!(out.contains("expert synthetic-0:") && out.contains("expert synthetic-4:"), "{out}");
}

#[test]
fn identity_model_reproduces_input_and_keeps_extent() {
    let dir = TempDir::new().unwrap();
    let model = identity_model(dir.path());
    let input = dir.path().join("in.png");
    let img = Tensor::from_fn(&[384, 512, 3], |i| ((i * 7919) % 256) as f32 / 255.0);
    save_image(&img, &input).unwrap();
    let output = dir.path().join("out.png");
    let o = bilateral(&["infer", "--model", s(&model), "--input", s(&input), "--output", s(&output)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let back = load_image(&output).unwrap();
    assert_eq!(back.shape(), &[384, 512, 3]);
    assert_eq!(back, img);

    let o = bilateral(&["infer", "--model", s(&model), "--input", s(&input), "--output", s(&output), "--verbose"]);
    assert!(stdout(&o).contains("512×384"));
}

#[test]
fn infer_names_both_versions_on_mismatch() {
    let dir = TempDir::new().unwrap();
    let model = identity_model(dir.path());
    let mut bytes = fs::read(&model).unwrap();
    bytes[..4].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&model, bytes).unwrap();
    let input = dir.path().join("in.ppm");
    save_image(&Tensor::<f32>::zeros(&[16, 16, 3]), &input).unwrap();
    let o = bilateral(&["infer", "--model", s(&model), "--input", s(&input), "--output", s(&dir.path().join("o.ppm"))]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("version 7") && err.contains("expected 1"), "{err}");
}

#[test]
fn eval_report_and_identity_expert() {
    let dir = TempDir::new().unwrap();
    let manifests = synth(dir.path(), 4, 16);
    let model = identity_model(dir.path());
    let report = dir.path().join("report.csv");
    // synthetic-1 is gamma(1.0): targets equal inputs.
    let o = bilateral(&["eval", "--model", s(&model), "--manifest", s(&manifests[1]), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mean loss 0.000000e0"), "{}", stdout(&o));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "input,expert,loss,psnr");
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[5].starts_with("mean,all,0,"));

    let o = bilateral(&["eval", "--model", s(&model), "--manifest", s(&manifests[0]), "--report", s(&report)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&report).unwrap();
    let rows: Vec<f64> = text.lines().skip(1).take(4).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let summary: f64 = text.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((summary - rows.iter().sum::<f64>() / 4.0).abs() < 1e-9);
}

#[test]
fn eval_on_empty_manifest_exits_two() {
    let dir = TempDir::new().unwrap();
    let model = identity_model(dir.path());
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = bilateral(&["eval", "--model", s(&model), "--manifest", s(&empty)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_failures_exit_one() {
    let dir = TempDir::new().unwrap();
    let o = bilateral(&["infer", "--model", s(&dir.path().join("none.ckpt")), "--input", "a.ppm", "--output", "b.ppm"]);
    assert_eq!(code(&o), 1);
    let o = bilateral(&["train", "--manifest", s(&dir.path().join("none.jsonl")), "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_reports_and_fails_on_absurd_tolerance() {
    let ok = bilateral(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let table = stdout(&ok);
    for op in ["conv2d", "fully_connected", "batch_norm", "relu_composite", "guidance", "slice", "apply", "loss", "model"] {
        assert!(table.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "{op}");
    }
    assert_eq!(stdout(&bilateral(&["gradcheck", "--seed", "1"])), table);
    let bad = bilateral(&["gradcheck", "--seed", "1", "--tolerance", "1e-12"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("gradient check failed") && stderr(&bad).contains("model"));
}
