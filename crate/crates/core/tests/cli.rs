//! End-to-end runs of the `adafocal` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adafocal"))
        .args(args)
        .output()
        .expect("spawn adafocal")
}

fn report(args: &[&str]) -> Value {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report json")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = path(dir, name);
    fs::write(&p, text).unwrap();
    p
}

fn all_checks_pass(r: &Value) -> bool {
    r["invariant_checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["pass"] == true)
}

const GT_2X2: &str = "P2\n2 2\n255\n255 0\n0 255\n";

#[test]
fn oracle_prediction_has_zero_loss() {
    let dir = TempDir::new().unwrap();
    let pred = write(&dir, "p.pm", "PM 2 2\n1 0\n0 1\n");
    let gt = write(&dir, "g.pgm", GT_2X2);
    for loss in ["bce", "focal", "afl"] {
        let r = report(&["loss", "eval", "--loss", loss, "--pred", &pred, "--gt", &gt]);
        assert!(r["results"]["value"].as_f64().unwrap().abs() < 1e-5, "{loss}: {r}");
        assert!(all_checks_pass(&r));
    }
}

#[test]
fn single_pixel_afl_value() {
    let dir = TempDir::new().unwrap();
    let pred = write(&dir, "p.pm", "PM 1 1\n0.5\n");
    let gt = write(&dir, "g.pgm", "P2\n1 1\n255\n255\n");
    let r = report(&["loss", "eval", "--pred", &pred, "--gt", &gt]);
    assert!((r["results"]["value"].as_f64().unwrap() - 0.434_961_9).abs() < 1e-6);
    assert_eq!(r["results"]["loss"], "afl");
}

#[test]
fn shape_mismatch_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let pred = write(&dir, "p.pm", "PM 1 2\n0.5 0.5\n");
    let gt = write(&dir, "g.pgm", GT_2X2);
    let out = run(&["loss", "eval", "--pred", &pred, "--gt", &gt]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_and_missing_inputs_exit_two() {
    let dir = TempDir::new().unwrap();
    let bad = write(&dir, "p.pm", "PM 2 2\n0.5 1.5\n0 1\n");
    let gt = write(&dir, "g.pgm", GT_2X2);
    assert_eq!(
        run(&["loss", "eval", "--pred", &bad, "--gt", &gt]).status.code(),
        Some(2)
    );
    let missing = path(&dir, "none.pm");
    assert_eq!(
        run(&["loss", "eval", "--pred", &missing, "--gt", &gt]).status.code(),
        Some(2)
    );
    let ok = write(&dir, "q.pm", "PM 2 2\n0.5 0.5\n0.5 0.5\n");
    let out = run(&[
        "loss", "eval", "--loss", "bce", "--gamma", "2", "--pred", &ok, "--gt", &gt,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_is_reproducible() {
    let args = [
        "loss",
        "grad-check",
        "--loss",
        "afl",
        "--loss",
        "dice",
        "--cases",
        "5",
        "--seed",
        "42",
    ];
    let a = report(&args);
    let b = report(&args);
    assert_eq!(a, b);
    assert!(all_checks_pass(&a));
    assert_ne!(
        a,
        report(&[
            "loss",
            "grad-check",
            "--loss",
            "afl",
            "--loss",
            "dice",
            "--cases",
            "5",
            "--seed",
            "43"
        ])
    );
}

#[test]
fn identity_check_passes() {
    let r = report(&["loss", "identity-check", "--maps", "10", "--seed", "1"]);
    assert!(all_checks_pass(&r));
    assert_eq!(r["versions"]["spec_version"], "1.0");
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn pt_plot_extremes() {
    let dir = TempDir::new().unwrap();
    let gt = write(&dir, "g.pgm", GT_2X2);
    let same = write(&dir, "same.pm", "PM 2 2\n1 0\n0 1\n");
    let half = write(&dir, "half.pm", "PM 2 2\n0.5 0.5\n0.5 0.5\n");
    let out = path(&dir, "pt.pm");

    let r = report(&["pt-plot", "--pred", &same, "--gt", &gt, "--out", &out]);
    assert!(all_checks_pass(&r));
    let text = fs::read_to_string(&out).unwrap();
    let vals: Vec<f64> = text
        .lines()
        .skip(1)
        .flat_map(str::split_whitespace)
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(vals.len(), 4);
    assert!(vals.iter().all(|v| (v - 1.0).abs() <= 1e-7));

    report(&["pt-plot", "--pred", &half, "--gt", &gt, "--out", &out]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text
        .lines()
        .skip(1)
        .flat_map(str::split_whitespace)
        .all(|t| t.parse::<f64>().unwrap() == 0.5));
}

#[test]
fn curve_rows_and_focal_limit() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "curve.csv");
    let r = report(&[
        "loss",
        "curve",
        "--gammas",
        "0,2",
        "--gamma-as",
        "0,0.5",
        "--points",
        "9",
        "--out",
        &out,
    ]);
    assert!(all_checks_pass(&r));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("gamma,gamma_a,gamma_d,pt,loss,grad"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|t| t.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2 * 2 * 9);
    for row in rows.iter().filter(|r| r[1] == 0.0) {
        let (g, pt) = (row[0], row[3]);
        let focal = -(1.0 - pt).powf(g) * pt.ln();
        assert!((row[4] - focal).abs() <= 1e-12, "{row:?}");
    }
}

#[test]
fn match_costs_and_instances() {
    let dir = TempDir::new().unwrap();
    let costs = write(&dir, "c.json", "[[4, 1, 3], [2, 0, 5], [3, 2, 2]]");
    let out = path(&dir, "m.json");
    let r = report(&["match", "--costs", &costs, "--out", &out]);
    assert_eq!(r["results"]["match"]["total_cost"].as_f64(), Some(5.0));
    let written: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(written, r["results"]["match"]);

    let preds = dir.path().join("preds");
    let gts = dir.path().join("gts");
    fs::create_dir_all(&preds).unwrap();
    fs::create_dir_all(&gts).unwrap();
    fs::write(preds.join("a.pm"), "PM 2 2\n0 1\n1 0\n").unwrap();
    fs::write(preds.join("b.pm"), "PM 2 2\n0.9 0.1\n0.1 0.9\n").unwrap();
    fs::write(preds.join("classes.json"), "[[0.9, 0.1], [0.8, 0.2]]").unwrap();
    fs::write(gts.join("x.pgm"), GT_2X2).unwrap();
    let r = report(&[
        "match",
        "--pred-dir",
        preds.to_str().unwrap(),
        "--gt-dir",
        gts.to_str().unwrap(),
    ]);
    let assignment = &r["results"]["match"]["assignment"];
    assert_eq!(assignment, &serde_json::json!([[1, 0]]));
    assert!(r["results"]["loss"]["total_loss"].as_f64().unwrap().is_finite());
}

fn spec_file(dir: &TempDir) -> String {
    write(
        dir,
        "spec.json",
        r#"{"height": 32, "width": 32, "n_instances": 2, "shape_kind": "ellipse", "boundary_noise": 0.5,
            "intensity_noise": 0.1, "nesting": false, "seed": 0}"#,
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_gen_is_seeded() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(&dir);
    let (a, b, c) = (path(&dir, "a"), path(&dir, "b"), path(&dir, "c"));
    report(&["synth", "gen", "--spec", &spec, "--out", &a, "--seed", "3"]);
    report(&["synth", "gen", "--spec", &spec, "--out", &b, "--seed", "3"]);
    report(&["synth", "gen", "--spec", &spec, "--out", &c, "--seed", "4"]);
    let (a, b, c) = (
        dir_bytes(Path::new(&a)),
        dir_bytes(Path::new(&b)),
        dir_bytes(Path::new(&c)),
    );
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);

    let many = path(&dir, "many");
    report(&[
        "synth", "gen", "--spec", &spec, "--out", &many, "--seed", "3", "--count", "3",
    ]);
    assert_eq!(fs::read_dir(&many).unwrap().count(), 3);
}

#[test]
fn train_then_evaluate_noc() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(&dir);
    let model_dir = path(&dir, "model");
    let r = report(&[
        "train",
        "demo",
        "--spec",
        &spec,
        "--steps",
        "150",
        "--seed",
        "5",
        "--compare",
        "bce,focal",
        "--out",
        &model_dir,
    ]);
    assert!(all_checks_pass(&r));
    let log = fs::read_to_string(Path::new(&model_dir).join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 151);
    assert!(Path::new(&model_dir).join("log_focal.csv").exists());

    let model = format!("trained:{}", Path::new(&model_dir).join("model.json").display());
    let dataset = format!("synth:{spec}");
    let traces = path(&dir, "noc.json");
    let args = [
        "noc",
        "run",
        "--predictor",
        &model,
        "--dataset",
        &dataset,
        "--samples",
        "4",
        "--seed",
        "9",
        "--out",
        &traces,
    ];
    let r = report(&args);
    assert!(all_checks_pass(&r));
    let first = fs::read(&traces).unwrap();
    report(&args);
    assert_eq!(first, fs::read(&traces).unwrap());
    let t: Value = serde_json::from_slice(&first).unwrap();
    let s = &t["summary"];
    assert!(s["noc85"].as_f64().unwrap() <= s["noc90"].as_f64().unwrap());
    assert_eq!(t["traces"].as_array().unwrap().len(), 4 * 2);
}

#[test]
fn oracle_noc_on_written_sample() {
    let dir = TempDir::new().unwrap();
    let spec = spec_file(&dir);
    let sample = path(&dir, "sample");
    report(&["synth", "gen", "--spec", &spec, "--out", &sample, "--seed", "1"]);
    let out = path(&dir, "noc.json");
    let r = report(&[
        "noc",
        "run",
        "--predictor",
        "oracle",
        "--dataset",
        &sample,
        "--seed",
        "0",
        "--out",
        &out,
    ]);
    assert_eq!(r["results"]["summary"]["noc90"].as_f64(), Some(1.0));
    let bad = run(&[
        "noc",
        "run",
        "--predictor",
        "psychic",
        "--dataset",
        &sample,
        "--seed",
        "0",
        "--out",
        &out,
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_echo_reproduces_run() {
    let r = report(&[
        "attention",
        "demo",
        "--queries",
        "4",
        "--dim",
        "8",
        "--hw",
        "32",
        "32",
        "--blocks",
        "2",
        "--seed",
        "6",
    ]);
    assert!(all_checks_pass(&r));
    let c = &r["config"];
    let hw: Vec<String> = c["hw"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    let args: Vec<String> = [
        "attention",
        "demo",
        "--queries",
        &c["queries"].to_string(),
        "--dim",
        &c["dim"].to_string(),
        "--hw",
        &hw[0],
        &hw[1],
        "--blocks",
        &c["blocks"].to_string(),
        "--seed",
        &c["seed"].to_string(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let again = report(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(r, again);
}

#[test]
fn report_flag_writes_same_json() {
    let dir = TempDir::new().unwrap();
    let file = path(&dir, "report.json");
    let r = report(&[
        "--report",
        &file,
        "loss",
        "identity-check",
        "--maps",
        "3",
        "--seed",
        "2",
    ]);
    let saved: Value = serde_json::from_str(&fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(r, saved);
}
