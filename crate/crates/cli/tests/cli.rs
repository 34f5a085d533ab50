use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kinecal::kinecore::{pack, Perturbation, RobotModel};
use kinecal::measurements::Dataset;
use kinecal::simlab::parameter_error;
use serde_json::Value;
use sha2::{Digest, Sha256};

const MASK: &str = r#"mask = [
  "l1.*", "l2.*", "l3.*", "l4.*", "l5.*", "l6.a", "l6.d", "l6.theta_offset",
  "r1.*", "r2.*", "r3.*", "r4.*", "r5.*", "r6.a", "r6.d", "r6.theta_offset",
  "board.*", "tracker.*",
]"#;

fn kinecal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinecal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes a desk-rig scenario and simulates it into `dir/sim`.
fn simulate(dir: &Path, seed: u64, sigma_scale: f64, counts: [usize; 4]) -> PathBuf {
    let spec = dir.join(format!("scenario_{seed}.toml"));
    std::fs::write(
        &spec,
        format!(
            "seed = {seed}\n{MASK}\n[perturbation]\nlength = 0.005\nangle = 0.02\n\
             [counts]\nself_contact = {}\nplane_contact = {}\nself_observation = {}\nexternal = {}\n\
             [sigmas]\nself_contact = {}\nplane_contact = {}\nself_observation = {}\nexternal = {}\n",
            counts[0],
            counts[1],
            counts[2],
            counts[3],
            5e-4 * sigma_scale,
            5e-4 * sigma_scale,
            sigma_scale,
            5e-4 * sigma_scale,
        ),
    )
    .unwrap();
    let out = dir.join(format!("sim_{seed}_{sigma_scale}"));
    let o = kinecal(&["simulate", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn run_args<'a>(sim: &'a Path, out: &'a Path) -> Vec<String> {
    vec![
        "--robot".into(),
        sim.join("nominal_robot.json").display().to_string(),
        "--dataset".into(),
        sim.join("dataset.jsonl").display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

fn with_truth(mut args: Vec<String>, sim: &Path) -> Vec<String> {
    args.push("--truth".into());
    args.push(sim.join("true_robot.json").display().to_string());
    args
}

fn run(cmd: &str, args: &[String], extra: &[&str]) -> Output {
    let mut all: Vec<&str> = vec![cmd];
    all.extend(args.iter().map(String::as_str));
    all.extend(extra);
    kinecal(&all)
}

#[test]
fn simulate_writes_three_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), 3, 1.0, [20, 20, 20, 20]);
    let files = ["nominal_robot.json", "true_robot.json", "dataset.jsonl"];
    let mut entries: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    entries.sort();
    let mut expected = files.map(String::from).to_vec();
    expected.sort();
    assert_eq!(entries, expected);
    let first: Vec<String> = files.iter().map(|f| sha(&a.join(f))).collect();
    std::fs::remove_dir_all(&a).unwrap();
    let b = simulate(dir.path(), 3, 1.0, [20, 20, 20, 20]);
    let second: Vec<String> = files.iter().map(|f| sha(&b.join(f))).collect();
    assert_eq!(first, second);
    let d = Dataset::load(b.join("dataset.jsonl")).unwrap();
    assert_eq!(d.len(), 80);
    assert_eq!(d.provenance.seed, Some(3));
}

#[test]
fn malformed_spec_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    std::fs::write(&spec, "seed = 1\ncontact_tolerance = -1.0\n").unwrap();
    let o = kinecal(&[
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("contact_tolerance"), "{}", stderr(&o));
    std::fs::write(&spec, "seed = 1\ncountz = {}\n").unwrap();
    let o = kinecal(&[
        "simulate",
        "--spec",
        s(&spec),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("countz"), "{}", stderr(&o));
}

#[test]
fn partial_dataset_is_degraded_success() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("partial.toml");
    // a few draws per record cannot always see the marker
    std::fs::write(
        &spec,
        "seed = 2\nmax_attempts = 5\n[counts]\nself_observation = 60\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = kinecal(&["simulate", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("self_observation"));
    let d = Dataset::load(out.join("dataset.jsonl")).unwrap();
    assert!(d.len() < 60 && !d.is_empty());
}

#[test]
fn calibrate_filters_kinds_and_reports_truth_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 4, 1.0, [60, 60, 60, 60]);
    let out = dir.path().join("cal");
    let args = with_truth(run_args(&sim, &out), &sim);
    let inputs: Vec<String> = ["nominal_robot.json", "true_robot.json", "dataset.jsonl"]
        .iter()
        .map(|f| sha(&sim.join(f)))
        .collect();
    let o = run(
        "calibrate",
        &args,
        &["--kinds", "sc", "--split", "0.5", "--jacobian", "central"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("calibration.json"));
    assert_eq!(r["kinds"], serde_json::json!(["self_contact"]));
    assert_eq!(r["train_records"], 30);
    assert_eq!(r["solver"]["rows"], 90);
    assert!(
        r["solver"]["final_cost"].as_f64().unwrap() < r["solver"]["initial_cost"].as_f64().unwrap()
    );
    assert_eq!(r["config"]["solve"]["jacobian_mode"], "central_diff");

    // recompute the error from the two robot files
    let truth = RobotModel::load(sim.join("true_robot.json")).unwrap();
    let cal = RobotModel::load(out.join("calibrated_robot.json")).unwrap();
    let reference = Perturbation {
        length: 5e-3,
        angle: 0.02,
    };
    let e = parameter_error(&pack(&cal), &pack(&truth), &reference, |_| true).unwrap();
    let reported = &r["parameter_error"]["calibrated"];
    for (k, v) in [
        ("length_rms", e.length_rms),
        ("angle_rms", e.angle_rms),
        ("normalized_rms", e.normalized_rms),
    ] {
        let got = reported[k].as_f64().unwrap();
        assert!(
            (got - v).abs() <= 1e-12 * v.abs().max(1e-12),
            "{k}: {got} vs {v}"
        );
    }
    let after: Vec<String> = ["nominal_robot.json", "true_robot.json", "dataset.jsonl"]
        .iter()
        .map(|f| sha(&sim.join(f)))
        .collect();
    assert_eq!(inputs, after, "inputs were modified");
}

#[test]
fn calibrate_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 5, 1.0, [30, 0, 0, 0]);
    let out = dir.path().join("cal");
    let args = run_args(&sim, &out);
    let o = run("calibrate", &args, &["--kinds", "ext"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no measurement"), "{}", stderr(&o));
    let o = run("calibrate", &args, &["--kinds", "xyz"]);
    assert_eq!(code(&o), 1);
    let o = run("calibrate", &args, &["--robust", "huber:0"]);
    assert_eq!(code(&o), 1);
    let o = kinecal(&[
        "calibrate",
        "--robot",
        "/nonexistent.json",
        "--dataset",
        "x",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not exist"));
    let o = kinecal(&["calibrate", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn calibrate_without_truth_reports_null_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 6, 1.0, [40, 0, 40, 0]);
    let out = dir.path().join("cal");
    let o = run("calibrate", &run_args(&sim, &out), &["--robust", "huber:3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("calibration.json"));
    assert!(r["parameter_error"].is_null());
    assert!(RobotModel::load(out.join("calibrated_robot.json")).is_ok());
}

#[test]
fn evaluate_recovers_noiseless_data_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 7, 0.0, [80, 80, 80, 80]);
    let out = dir.path().join("eval");
    let o = run("evaluate", &with_truth(run_args(&sim, &out), &sim), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("evaluation.json"));
    for (k, v) in r["test"]["calibrated"]["rms"].as_object().unwrap() {
        assert!(v.as_f64().unwrap() < 1e-7, "{k}: {v}");
    }
    assert!(r["observability"]["unidentifiable"]
        .as_array()
        .unwrap()
        .is_empty());
}

#[test]
fn evaluate_beats_nominal_on_held_out_records() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 8, 1.0, [50, 50, 50, 50]);
    for mode in ["random", "workspace"] {
        let out = dir.path().join(mode);
        let o = run(
            "evaluate",
            &run_args(&sim, &out),
            &["--split-mode", mode, "--split", "0.6"],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r = read_json(&out.join("evaluation.json"));
        assert!(r["parameter_error"].is_null());
        assert_eq!(
            r["train_records"].as_u64().unwrap() + r["test_records"].as_u64().unwrap(),
            200
        );
        let nominal = r["test"]["nominal"]["rms"].as_object().unwrap();
        for (k, v) in r["test"]["calibrated"]["rms"].as_object().unwrap() {
            assert!(
                v.as_f64().unwrap() < nominal[k].as_f64().unwrap(),
                "{mode} {k}"
            );
        }
    }
    let o = run(
        "evaluate",
        &run_args(&sim, &dir.path().join("x")),
        &["--split", "1"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn observability_exit_code_reflects_rank() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 9, 1.0, [40, 40, 40, 40]);
    let out = dir.path().join("obs");
    let o = run("observability", &run_args(&sim, &out), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&out.join("observability.json"));
    assert_eq!(r["rows"], 40 * 9);
    assert!(r["full"]["o3"].as_f64().unwrap() > 0.0);
    assert!(r["kept"]
        .as_array()
        .unwrap()
        .iter()
        .all(|k| !k.as_str().unwrap().starts_with("board")));

    // plane contacts alone leave combinations unidentified
    let o = run("observability", &run_args(&sim, &out), &["--kinds", "pl"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let r = read_json(&out.join("observability.json"));
    let null = r["unidentifiable"].as_array().unwrap();
    assert!(!null.is_empty());
    assert!(null[0]["components"][0]["key"].is_string());
}

#[test]
fn campaign_is_identical_in_parallel_and_serial() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 10, 1.0, [40, 40, 40, 40]);
    let par = dir.path().join("par");
    let ser = dir.path().join("ser");
    let args = with_truth(run_args(&sim, &par), &sim);
    let o = run("campaign", &args, &["--split", "0.75"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let args = with_truth(run_args(&sim, &ser), &sim);
    let o = run("campaign", &args, &["--split", "0.75", "--serial"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        sha(&par.join("campaign.json")),
        sha(&ser.join("campaign.json"))
    );
    assert_eq!(
        sha(&par.join("campaign.csv")),
        sha(&ser.join("campaign.csv"))
    );
    let r = read_json(&par.join("campaign.json"));
    assert_eq!(r["total"], 30);
    assert_eq!(r["runs"].as_array().unwrap().len(), 11);
    for run in r["runs"].as_array().unwrap() {
        let n: u64 = run["counts"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(n, 30);
        assert!(par
            .join("runs")
            .join(run["label"].as_str().unwrap())
            .join("calibrated_robot.json")
            .exists());
    }
    let csv = std::fs::read_to_string(par.join("campaign.csv")).unwrap();
    assert!(csv.starts_with(
        "rank,kinds,records,m,o1,o2,o3,o4,unidentifiable,parameter_rms,test_weighted_rms\n"
    ));
    assert_eq!(csv.lines().count(), 12);
}

#[test]
fn all_kinds_campaign_dominates_single_kinds() {
    let dir = tempfile::tempdir().unwrap();
    for seed in [11, 12] {
        let sim = simulate(dir.path(), seed, 1.0, [200, 200, 200, 200]);
        let out = dir.path().join(format!("camp{seed}"));
        let o = run("campaign", &run_args(&sim, &out), &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r = read_json(&out.join("campaign.json"));
        let runs = r["runs"].as_array().unwrap();
        let all = runs
            .iter()
            .find(|r| r["kinds"].as_array().unwrap().len() == 4)
            .unwrap();
        let o1 = |r: &Value| r["observability"]["o1"].as_f64().unwrap();
        let test = |r: &Value| r["test"]["weighted_rms"].as_f64().unwrap();
        for single in runs
            .iter()
            .filter(|r| r["kinds"].as_array().unwrap().len() == 1)
        {
            assert!(
                o1(all) > o1(single),
                "seed {seed}: O1 vs {}",
                single["label"]
            );
            assert!(
                test(all) < test(single),
                "seed {seed}: test rms vs {}",
                single["label"]
            );
        }
    }
}
