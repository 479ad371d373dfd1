//! End-to-end tests of the command-line surface, run against the built
//! binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cyclegraph"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cyclegraph")
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    for d in [&d1, &d2] {
        let out = run(&[
            "gen-data",
            "--n",
            "4",
            "--seed",
            "7",
            "--width",
            "16",
            "--height",
            "16",
            "--period",
            "4",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(tree_bytes(&d1), tree_bytes(&d2));
}

#[test]
fn unknown_flag_fails_with_usage_on_stderr() {
    let out = run(&["gen-data", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{}", stderr);
}

#[test]
fn unknown_subcommand_fails() {
    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_file_exits_2() {
    let out = run(&[
        "eval",
        "--ckpt",
        "/nonexistent/model.ckpt",
        "--data",
        "/nonexistent/data",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes_and_emits_json() {
    let out = bin().args(["grad-check", "--json"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["status"], "ok");
    assert!(v["rel_error_f32"].as_f64().unwrap() < 1e-3);
    assert!(v["rel_error_f64"].as_f64().unwrap() < 1e-6);
}

#[test]
fn full_pipeline_train_eval_animate_loopfind() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "gen-data",
        "--n",
        "4",
        "--seed",
        "3",
        "--width",
        "16",
        "--height",
        "16",
        "--period",
        "4",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // tiny training config
    let cfg = r#"{
        "batch_size": 2,
        "steps": 6,
        "learning_rate": 0.001,
        "seed": 5,
        "model": {"base_channels": [4, 8], "divisor": 1, "code_dim": 12,
                  "in_channels": 3, "out_channels": 3}
    }"#;
    let cfg_path = dir.path().join("train.json");
    std::fs::write(&cfg_path, cfg).unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir.join("checkpoint.ckpt");
    assert!(ckpt.exists());
    assert!(run_dir.join("loss_curve.csv").exists());
    assert!(run_dir.join("report.json").exists());

    // eval with explicit report
    let report = dir.path().join("eval_report.json");
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["masked_mae"].as_f64().is_some());

    // animate from the generated assets of sequence 0
    let seq0 = data.join("seq_0000");
    // build an input image (flat gray) matching the 16x16 assets
    let anim = dir.path().join("anim");
    let gray = image_png(dir.path(), 16, 16);
    let out = run(&[
        "animate",
        "--image",
        gray.to_str().unwrap(),
        "--normals",
        seq0.join("normal_0000.png").to_str().unwrap(),
        "--mask",
        seq0.join("mask.png").to_str().unwrap(),
        "--wind",
        "1,0",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--period",
        "6",
        "--out",
        anim.to_str().unwrap(),
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for t in 0..6 {
        assert!(anim.join(format!("frame_{:04}.png", t)).exists());
    }
    assert!(anim.join("out.gif").exists());

    // the animation loops: loopfind over its frames finds a cheap seam
    let out = run(&[
        "loopfind",
        "--frames",
        anim.to_str().unwrap(),
        "--p-min",
        "2",
        "--p-max",
        "5",
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let v: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(v["status"], "ok");
}

#[test]
fn animate_rejects_zero_wind() {
    let dir = tempfile::tempdir().unwrap();
    let gray = image_png(dir.path(), 8, 8);
    let out = run(&[
        "animate",
        "--image",
        gray.to_str().unwrap(),
        "--normals",
        gray.to_str().unwrap(),
        "--mask",
        gray.to_str().unwrap(),
        "--wind",
        "0,0",
        "--ckpt",
        "/nonexistent.ckpt",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wind"));
}

/// Write a flat gray PNG and return its path.
fn image_png(dir: &Path, w: u32, h: u32) -> std::path::PathBuf {
    let path = dir.join("gray.png");
    let file = std::fs::File::create(&path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().unwrap();
    writer
        .write_image_data(&vec![128u8; (w * h * 3) as usize])
        .unwrap();
    path
}
