use std::path::Path;
use std::process::{Command, Output};

fn lcz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcz")).args(args).output().expect("spawn lcz")
}

fn config(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// The structured error line is the last line on stderr.
fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flags_beat_the_file_which_beats_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.json");
    std::fs::write(&file, r#"{"seed": 7, "train": {"max_epochs": 40, "batch_size": 32}, "map": {"cell_size_m": 200}}"#).unwrap();

    let defaults = config(&lcz(&["--print-config", "train-cnn", "--dataset", "x"]));
    assert_eq!(defaults["train"]["max_epochs"], 500);
    assert_eq!(defaults["train"]["batch_size"], 96);

    let from_file = config(&lcz(&["--config", s(&file), "--print-config", "train-cnn", "--dataset", "x"]));
    assert_eq!(from_file["seed"], 7);
    assert_eq!(from_file["train"]["seed"], 7);
    assert_eq!(from_file["train"]["max_epochs"], 40);
    assert_eq!(from_file["train"]["batch_size"], 32);
    assert_eq!(from_file["train"]["early_stop_patience"], 15);
    assert_eq!(from_file["map"]["cell_size_m"], 200.0);

    let flags = config(&lcz(&[
        "--config", s(&file), "--seed", "3", "--print-config", "train-cnn", "--dataset", "x", "--max-epochs", "5",
    ]));
    assert_eq!(flags["seed"], 3);
    assert_eq!(flags["scenario"]["seed"], 3);
    assert_eq!(flags["train"]["max_epochs"], 5);
    assert_eq!(flags["train"]["batch_size"], 32);
}

#[test]
fn usage_errors_exit_2() {
    let out = lcz(&["train-rf", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.json");
    std::fs::write(&file, r#"{"sede": 1}"#).unwrap();
    let out = lcz(&["--config", s(&file), "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&file, r#"{"train": {"batch_size": 0}}"#).unwrap();
    assert_eq!(lcz(&["--config", s(&file), "gradcheck"]).status.code(), Some(2));

    let out = lcz(&["synth", "--width", "256"]);
    assert_eq!(out.status.code(), Some(2), "missing --out");
    assert_eq!(lcz(&["gradcheck", "--component", "nope"]).status.code(), Some(2));
    assert_eq!(lcz(&["--out", "x", "split", "--dataset", "x", "--ratios", "0.5,0.5"]).status.code(), Some(2));
    assert_eq!(lcz(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = lcz(&["--out", s(&dir.path().join("n.rawg")), "ndvi", "--input", s(&dir.path().join("missing.rawg"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "io");

    let junk = dir.path().join("junk.lcz1");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let out = lcz(&["--out", s(&dir.path().join("rf.json")), "train-rf", "--dataset", s(&junk)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_prints_one_line_per_component() {
    let out = lcz(&["gradcheck", "--component", "dense"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["component"], "dense");
    assert_eq!(v["pass"], true);
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn scene_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let scene = d("scene");
    let ok = |args: &[&str]| {
        let out = lcz(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["--seed", "4", "--out", s(&scene), "synth", "--width", "320", "--height", "320", "--noise-sigma", "0"]);
    for name in ["bands", "ndvi", "height", "building_fraction", "impervious", "water", "truth"] {
        assert!(scene.join(format!("{name}.rawg")).exists(), "{name}");
    }
    let out = ok(&["--out", s(&d("labeled.csv")), "label-assist", "--layers", s(&scene), "--points", s(&scene.join("points.csv"))]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["points"], summary["labeled"]);
    assert_eq!(summary["points"], summary["agree"]);
    let labeled = std::fs::read_to_string(d("labeled.csv")).unwrap();
    assert!(labeled.lines().skip(1).all(|l| l.contains("rule=")));

    ok(&["--out", s(&d("p.lcz1")), "sample", "--raster", s(&scene.join("bands.rawg")), "--points", s(&d("labeled.csv"))]);
    ok(&["--out", s(&d("a.lcz1")), "augment", "--dataset", s(&d("p.lcz1")), "--target-per-class", "10"]);
    ok(&["--out", s(&d("s.lcz1")), "split", "--dataset", s(&d("a.lcz1")), "--ratios", "0.6,0.2,0.2"]);
    ok(&["--out", s(&d("rf.json")), "train-rf", "--dataset", s(&d("s.lcz1")), "--n-trees", "20"]);
    let out = ok(&["eval", "--model", s(&d("rf.json")), "--dataset", s(&d("s.lcz1"))]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let oa = report["overall_accuracy"].as_f64().unwrap();
    assert!(oa > 0.9, "{oa}");
    ok(&["--out", s(&d("map.rawg")), "map", "--model", s(&d("rf.json")), "--raster", s(&scene.join("bands.rawg"))]);
    let map = lcz_core::raster::load_raster(d("map.rawg")).unwrap();
    assert_eq!((map.width, map.height, map.pixel_size_m), (32, 32, 100.0));
    assert!(d("map.palette.json").exists());
}
