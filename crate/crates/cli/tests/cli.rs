use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn voxdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdiff")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = voxdiff(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "seed": 5,
  "T": 8,
  "phase1_epochs": 2,
  "phase2_epochs": 1,
  "data": { "objects": 2, "views": 6, "image_size": 24, "points_per_view": 512 },
  "metrics": { "surface_points": 512, "emd_points": 64, "completions": 2 },
  "render": { "samples": 16 }
}"#,
    )
    .unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = voxdiff(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(voxdiff(&[]).status.code(), Some(1));
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("gen-data", &["--config", "--seed", "--out"]),
        ("train", &["--config", "--seed", "--dataset", "--out"]),
        ("sample", &["--config", "--seed", "--ckpt", "--input", "--completions", "--out"]),
        ("render-views", &["--config", "--seed", "--grid", "--camera", "--out"]),
        ("eval", &["--config", "--seed", "--pred", "--gt", "--partial", "--out"]),
    ];
    for (cmd, flags) in cases {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8(out.stdout).unwrap();
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn bad_config_names_the_key_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"T": 0}"#).unwrap();
    let out = voxdiff(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`T`"));

    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    let out = voxdiff(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxdiff(&["train", "--dataset", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = voxdiff(&["gen-data", "--config", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn logs_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ok(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    let text = String::from_utf8(out.stderr).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["ts"].is_number() && v["event"].is_string());
    }
    assert!(out.stdout.is_empty());
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |tag: &str| -> PathBuf {
        let root = dir.path().join(tag);
        let data = root.join("data");
        ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
        let model = root.join("model");
        ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&model)]);
        let samples = root.join("samples");
        let view = data.join("obj_0000").join("view_0.ply");
        ok(&["sample", "--config", s(&cfg), "--ckpt", s(&model.join("model")), "--input", s(&view), "--out", s(&samples)]);
        let renders = root.join("renders");
        ok(&["render-views", "--config", s(&cfg), "--grid", s(&data.join("obj_0000").join("gt")), "--out", s(&renders)]);
        let eval = root.join("eval");
        ok(&[
            "eval", "--config", s(&cfg),
            "--pred", s(&samples.join("completion_0")),
            "--pred", s(&samples.join("completion_1.grid.json")),
            "--gt", s(&data.join("obj_0000").join("gt")),
            "--partial", s(&view),
            "--out", s(&eval),
        ]);
        root
    };
    let (a, b) = (run("a"), run("b"));
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert!(fa.iter().any(|(p, _)| p.ends_with("model.ckpt.bin")));
    assert!(fa.iter().any(|(p, _)| p.ends_with("completion_1.grid.bin")));
    assert!(fa.iter().any(|(p, _)| p.ends_with("view_0.pfm")));
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between runs", pa.display());
    }

    let loss = fs::read_to_string(a.join("model/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("eval/report.json")).unwrap()).unwrap();
    for key in ["precision", "recall", "f1", "emd", "chamfer", "uhd", "mmd", "tmd"] {
        assert!(report[key].is_number(), "{key} missing from {report}");
    }

    // a different seed changes the data
    let other = dir.path().join("c");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "6", "--out", s(&other)]);
    assert_ne!(
        fs::read(other.join("obj_0000/view_0.ply")).unwrap(),
        fs::read(a.join("data/obj_0000/view_0.ply")).unwrap()
    );
}

#[test]
fn eval_on_point_clouds_populates_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let pts = |shift: f64| {
        let mut text = String::from("ply\nformat ascii 1.0\nelement vertex 64\nproperty float x\nproperty float y\nproperty float z\nend_header\n");
        for i in 0..64 {
            let (a, b) = ((i % 8) as f64 / 8.0, (i / 8) as f64 / 8.0);
            text.push_str(&format!("{} {} {}\n", a + shift, b, a * b));
        }
        text
    };
    let (p, g) = (dir.path().join("p.ply"), dir.path().join("g.ply"));
    fs::write(&p, pts(0.01)).unwrap();
    fs::write(&g, pts(0.0)).unwrap();
    let out = ok(&["eval", "--pred", s(&p), "--gt", s(&g)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["precision", "recall", "f1", "emd", "chamfer", "uhd", "mmd", "tmd"] {
        assert!(report[key].is_number(), "{key} missing from {report}");
    }
    assert_eq!(report["tmd"], 0.0);
    let same = ok(&["eval", "--pred", s(&g), "--gt", s(&g)]);
    let report: serde_json::Value = serde_json::from_slice(&same.stdout).unwrap();
    assert_eq!(report["f1"], 1.0);
    assert_eq!(report["chamfer"], 0.0);
}
