use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ampsim_cli::run_with_io;
use ampsim_core::estimators::{
    amplification_factor, estimate, slope_through_origin, EstimatorSpec,
};
use ampsim_core::sem::parse_spec;
use ampsim_core::simulate::{draw_dataset, SeedPolicy};
use serde_json::Value;

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["ampsim"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with_io(&argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

#[test]
fn bounds_prints_the_feasible_interval() {
    let (code, out, _) = run(&[
        "bounds",
        "--spec",
        &config("bounds_045.json"),
        "--edge",
        "U,A",
    ]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(format!("{:.3}", v["lower"].as_f64().unwrap()), "-0.893");
    assert_eq!(format!("{:.3}", v["upper"].as_f64().unwrap()), "0.893");
    assert_eq!(v["binding_constraints"], serde_json::json!(["A"]));
}

#[test]
fn unconstrained_bound_serializes_as_null() {
    let (code, out, _) = run(&[
        "bounds",
        "--spec",
        &config("four_node.json"),
        "--edge",
        "A,Y",
    ]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    // Y has a target variance, so A->Y is bounded on both sides here.
    assert!(v["lower"].is_number() && v["upper"].is_number());
    let (code, out, _) = run(&["bounds", "--spec", &config("ten_bav.json"), "--edge", "A,Y"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v["lower"].is_null() && v["upper"].is_null());
}

#[test]
fn usage_errors_exit_two() {
    let spec = config("four_node.json");
    let base = [
        "simulate",
        "--spec",
        spec.as_str(),
        "--n",
        "100",
        "--truth-edge",
        "A,Y",
    ];
    let with = |extra: &[&str]| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        run(&v).0
    };
    assert_eq!(with(&["--reps", "0"]), 2);
    assert_eq!(with(&["--reps", "2", "--bogus"]), 2);
    assert_eq!(with(&["--reps", "2", "--estimators", "naive=BAV"]), 2);
    assert_eq!(with(&["--reps", "2", "--threads", "0"]), 2);
    assert_eq!(
        run(&[
            "simulate",
            "--spec",
            &spec,
            "--n",
            "10",
            "--reps",
            "1",
            "--truth-edge",
            "A"
        ])
        .0,
        2
    );
    assert_eq!(
        run(&[
            "intervene",
            "--spec",
            &spec,
            "--n",
            "10",
            "--reps",
            "1",
            "--truth-edge",
            "A,Y",
            "--edge",
            "U,A",
            "--values",
            "1:2"
        ])
        .0,
        2
    );
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn domain_errors_exit_one_with_the_error_name() {
    let spec = config("four_node.json");
    let (code, _, err) = run(&[
        "simulate",
        "--spec",
        &spec,
        "--n",
        "100",
        "--reps",
        "2",
        "--truth-edge",
        "A,Y",
        "--estimators",
        "adjusted=U",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("InfeasibleEstimator"), "{err}");
    let (code, _, err) = run(&[
        "intervene",
        "--spec",
        &spec,
        "--n",
        "100",
        "--reps",
        "2",
        "--truth-edge",
        "A,Y",
        "--edge",
        "U,A",
        "--values",
        "0.95",
        "--modes",
        "fixed",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("InfeasibleIntervention"), "{err}");
    let (code, _, err) = run(&["bounds", "--spec", &spec, "--edge", "A,U"]);
    assert_eq!(code, 1);
    assert!(err.contains("UnknownEdge"), "{err}");
    let (code, _, err) = run(&[
        "bounds",
        "--spec",
        "/nonexistent/spec.json",
        "--edge",
        "A,U",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("IoError"), "{err}");
}

#[test]
fn simulate_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = (path(&dir, "r.json"), path(&dir, "r.csv"));
    let (code, out, _) = run(&[
        "simulate",
        "--spec",
        &config("four_node.json"),
        "--n",
        "500",
        "--reps",
        "8",
        "--seed",
        "3",
        "--truth-edge",
        "A,Y",
        "--out-json",
        &json,
        "--out-csv",
        &csv,
    ]);
    assert_eq!(code, 0);
    assert!(out.is_empty());
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let labels: Vec<&str> = v["estimators"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["naive", "adjusted", "oracle"]);
    assert_eq!(
        v["closed_form_bias"]["adjusted"].as_f64().unwrap(),
        0.140625
    );
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "replicate,naive,adjusted,oracle"
    );
    assert_eq!(text.lines().count(), 9);
    // Only the two requested files in the directory: no stray temp files.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
}

fn simulate_bytes(threads: &str, dir: &tempfile::TempDir) -> (Vec<u8>, Vec<u8>) {
    let (json, csv) = (
        path(dir, &format!("s{threads}.json")),
        path(dir, &format!("s{threads}.csv")),
    );
    let (code, _, err) = run(&[
        "--threads",
        threads,
        "intervene",
        "--spec",
        &config("four_node.json"),
        "--n",
        "300",
        "--reps",
        "12",
        "--seed",
        "5",
        "--truth-edge",
        "A,Y",
        "--edge",
        "U,A",
        "--values",
        "0.4:0.5:0.1",
        "--out-json",
        &json,
        "--out-csv",
        &csv,
    ]);
    assert_eq!(code, 0, "{err}");
    (fs::read(json).unwrap(), fs::read(csv).unwrap())
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simulate_bytes("1", &dir), simulate_bytes("3", &dir));
}

#[test]
fn identity_intervention_rows_match_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(&dir, "i.csv");
    let (code, _, _) = run(&[
        "intervene",
        "--spec",
        &config("four_node.json"),
        "--n",
        "200",
        "--reps",
        "6",
        "--seed",
        "1",
        "--truth-edge",
        "A,Y",
        "--edge",
        "U,A",
        "--values",
        "0.3",
        "--out-csv",
        &csv,
        "--out-json",
        &path(&dir, "i.json"),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(csv).unwrap();
    let rows = |arm: &str| -> Vec<String> {
        text.lines()
            .filter(|l| l.starts_with(arm))
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert_eq!(rows("baseline,").len(), 6);
    assert_eq!(rows("fixed,"), rows("baseline,"));
    assert_eq!(rows("floating,"), rows("baseline,"));
}

#[test]
fn amplify_round_trips_through_csv() {
    let sem = parse_spec(&fs::read_to_string(config("four_node.json")).unwrap()).unwrap();
    let ds = draw_dataset(&sem, 400, SeedPolicy::new(8, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = path(&dir, "d.csv");
    fs::write(&data, ds.to_csv_string()).unwrap();

    let (code, out, _) = run(&[
        "amplify",
        "--data",
        &data,
        "--treatment",
        "A",
        "--controls",
        "none",
    ]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["factor"].as_f64().unwrap(), 1.0);

    let (code, out, _) = run(&[
        "amplify",
        "--data",
        &data,
        "--treatment",
        "A",
        "--controls",
        "BAV",
    ]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    let direct = amplification_factor(&ds, "A", &["BAV".to_string()]).unwrap();
    for (key, want) in [
        ("factor", direct.factor),
        ("r_squared", direct.r_squared),
        ("ssr_over_n", direct.ssr_over_n),
    ] {
        let got = v[key].as_f64().unwrap();
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1e-300),
            "{key}"
        );
    }
    let (code, _, err) = run(&[
        "amplify",
        "--data",
        &data,
        "--treatment",
        "A",
        "--controls",
        "W",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("UnknownColumn"), "{err}");
}

#[test]
fn partialplot_slope_equals_adjusted_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(&dir, "p.csv");
    let (code, _, _) = run(&[
        "partialplot",
        "--spec",
        &config("four_node.json"),
        "--n",
        "250",
        "--seed",
        "4",
        "--controls",
        "BAV",
        "--out",
        &out,
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(out).unwrap();
    let pts: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (x, y) = l.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect();
    assert_eq!(pts.len(), 250);
    let sem = parse_spec(&fs::read_to_string(config("four_node.json")).unwrap()).unwrap();
    let ds = draw_dataset(&sem, 250, SeedPolicy::new(4, 0)).unwrap();
    let adjusted = estimate(&ds, "A", "Y", &EstimatorSpec::adjusted(["BAV"])).unwrap();
    assert!((slope_through_origin(&pts) - adjusted).abs() < 1e-10);
}

#[test]
fn realdata_runs_with_intervention_arms() {
    let dir = tempfile::tempdir().unwrap();
    let (json, csv, data) = (
        path(&dir, "r.json"),
        path(&dir, "r.csv"),
        path(&dir, "rct.csv"),
    );
    let (code, _, err) = run(&[
        "realdata",
        "--config",
        &config("probit_control.json"),
        "--reps",
        "20",
        "--intervention",
        "1:0.55",
        "--out",
        &json,
        "--out-csv",
        &csv,
        "--export-data",
        &data,
    ]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let arms: Vec<&str> = v["report"]["arms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["arm"].as_str().unwrap())
        .collect();
    assert_eq!(arms, ["control", "fixed", "floating"]);
    assert_eq!(
        fs::read_to_string(&csv).unwrap().lines().count(),
        1 + 3 * 20
    );

    // Re-running on the exported data reproduces the same estimates.
    let json2 = path(&dir, "r2.json");
    let (code, _, _) = run(&[
        "realdata",
        "--config",
        &config("probit_control.json"),
        "--reps",
        "20",
        "--intervention",
        "1:0.55",
        "--data",
        &data,
        "--out",
        &json2,
    ]);
    assert_eq!(code, 0);
    let v2: Value = serde_json::from_str(&fs::read_to_string(&json2).unwrap()).unwrap();
    assert_eq!(v["report"], v2["report"]);

    assert_eq!(
        run(&[
            "realdata",
            "--config",
            &config("probit_control.json"),
            "--intervention",
            "0:0.5"
        ])
        .0,
        2
    );
    let (code, _, err) = run(&[
        "realdata",
        "--config",
        &config("probit_control.json"),
        "--reps",
        "2",
        "--intervention",
        "1:0.9",
        "--modes",
        "fixed",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("InfeasibleConfig"));
}

fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_ampsim"))
}

#[test]
fn binary_honours_thread_env_and_exit_codes() {
    let bounds = |env: Option<&str>| {
        let mut cmd = Command::new(binary());
        cmd.args([
            "bounds",
            "--spec",
            &config("bounds_045.json"),
            "--edge",
            "U,A",
        ]);
        if let Some(v) = env {
            cmd.env("AMPSIM_THREADS", v);
        }
        cmd.output().unwrap()
    };
    let ok = bounds(Some("2"));
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(ok.stdout, bounds(None).stdout);
    assert_eq!(bounds(Some("zero")).status.code(), Some(2));
    let out = Command::new(binary())
        .args(["simulate", "--reps", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
