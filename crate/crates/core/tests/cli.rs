use std::fs;
use std::path::Path;

use granulite::cli::{
    execute, parse_scenario, report, resume_from_checkpoint, Command, Scenario, Status, CHECKPOINT_FILE, MOMENTS_FILE,
    SCHEMA_VERSION, SUMMARY_FILE, SWEEP_FILE,
};
use granulite::observables::MOMENTS_CSV_HEADER;
use serde_json::Value;

fn scenario(text: &str, out: &Path) -> Scenario {
    let mut s = parse_scenario(text).unwrap();
    s.output.dir = out.to_path_buf();
    s
}

const TRAJECTORY: &str = r#"
name = "trajectory"
lambda = 0.2
n_particles = 5000
cells = [2, 2, 2]
t_end = 0.4
seed = 17

[restitution]
kind = "viscoelastic"

[init]
kind = "modulated"
theta = 0.5
epsilon = 0.2
k = [1, 0, 0]

[schedule]
moments_period = 0.05
modes = [[1, 0, 0]]
dissipation_samples = 5000
tail = [0.1, 1.0]
"#;

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE)).unwrap()).unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let s = execute(&scenario(TRAJECTORY, out), Command::Run);
        assert_eq!(s.status, Status::Ok, "{:?}", s.error);
    }
    let moments = fs::read_to_string(a.join(MOMENTS_FILE)).unwrap();
    assert_eq!(moments, fs::read_to_string(b.join(MOMENTS_FILE)).unwrap());
    assert_eq!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.join(CHECKPOINT_FILE)).unwrap());

    let mut lines = moments.lines();
    assert_eq!(lines.next(), Some(MOMENTS_CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() >= 9);
    assert!(rows.iter().all(|r| r.len() == MOMENTS_CSV_HEADER.split(',').count()));
    assert!(rows.iter().all(|r| r.iter().skip(7).all(|f| !f.is_empty())));
}

#[test]
fn summary_records_build_config_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    execute(&scenario(TRAJECTORY, dir.path()), Command::Run);
    let s = summary(dir.path());
    assert_eq!(s["schema_version"], SCHEMA_VERSION);
    assert_eq!(s["status"], "ok");
    assert_eq!(s["command"], "run");
    assert!(!s["build_id"].as_str().unwrap().is_empty());
    assert!(s["wall_time_s"].as_f64().unwrap() > 0.0);
    assert_eq!(s["resolved"]["model"]["kind"], "viscoelastic");
    assert!(s["resolved"]["dt"].as_f64().unwrap() > 0.0);
    assert_eq!(s["scenario"]["init"]["kind"], "modulated");
    let last = s["results"]["steps"].as_u64().unwrap();
    assert!((s["results"]["time"].as_f64().unwrap() - last as f64 * s["resolved"]["dt"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn resume_continues_the_interrupted_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let mut s = scenario(TRAJECTORY, &full);
    s.output.checkpoint_period = Some(0.1);
    assert_eq!(execute(&s, Command::Run).status, Status::Ok);

    let mut short = s.clone();
    short.output.dir = part.clone();
    short.t_end = 0.23;
    assert_eq!(execute(&short, Command::Run).status, Status::Ok);
    let resumed = resume_from_checkpoint(&part.join(CHECKPOINT_FILE), &Scenario { output: short.output.clone(), ..s.clone() });
    assert_eq!(resumed.status, Status::Ok, "{:?}", resumed.error);
    assert_eq!(
        fs::read_to_string(part.join(MOMENTS_FILE)).unwrap(),
        fs::read_to_string(full.join(MOMENTS_FILE)).unwrap()
    );
    assert_eq!(fs::read(part.join(CHECKPOINT_FILE)).unwrap(), fs::read(full.join(CHECKPOINT_FILE)).unwrap());
    assert!(summary(&part)["results"]["resumed_from"]["step"].as_u64().unwrap() > 0);
}

#[test]
fn mismatched_checkpoint_is_reported_in_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(TRAJECTORY, dir.path());
    execute(&s, Command::Run);
    let mut other = s.clone();
    other.seed += 1;
    let out = resume_from_checkpoint(&dir.path().join(CHECKPOINT_FILE), &other);
    assert_eq!(out.status, Status::Error);
    assert_eq!(out.exit_code(), 1);
    let v = summary(dir.path());
    assert_eq!(v["status"], "error");
    assert_eq!(v["error"]["kind"], "checkpoint");
    assert!(v["error"]["message"].as_str().unwrap().contains("seed"));
}

#[test]
fn restitution_check_writes_curve_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let text = "lambda = 0.1\nn_particles = 10\n[restitution]\nkind = \"viscoelastic\"\n";
    let s = execute(&scenario(text, dir.path()), Command::CheckRestitution);
    assert_eq!(s.status, Status::Ok, "{:?}", s.error);
    let v = summary(dir.path());
    assert_eq!(v["results"]["all_passed"], true);
    let gamma = v["results"]["assumptions"]["expansion"]["gamma"].as_f64().unwrap();
    assert!((gamma - 0.2).abs() < 0.02);

    let late_cap = "lambda = 0.1\nn_particles = 10\n[restitution]\nkind = \"capped\"\na = 2.0\ngamma = 0.5\ne_min = 0.1\n";
    let s = execute(&scenario(late_cap, dir.path()), Command::CheckRestitution);
    assert_eq!(s.status, Status::Error);
    assert_eq!(summary(dir.path())["error"]["kind"], "quality");
}

#[test]
fn haff_probe_fits_free_cooling() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
lambda = 0.0
n_particles = 20000
t_end = 2.0
thermostat = false
seed = 4
[restitution]
kind = "constant"
e0 = 0.8
[schedule]
moments_period = 0.02
[probe]
kind = "haff"
"#;
    let s = scenario(text, dir.path());
    let out = execute(&s, Command::for_scenario(&s));
    assert_eq!(out.status, Status::Ok, "{:?}", out.error);
    let haff = &summary(dir.path())["results"]["haff"];
    assert_eq!(haff["strictly_decreasing"], true);
    assert!((haff["p"].as_f64().unwrap() - 2.0).abs() < 0.1, "{haff}");
    assert!(haff["r_squared"].as_f64().unwrap() > 0.99);
}

#[test]
fn sweep_over_four_lambdas_fits_the_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
name = "small-sweep"
lambda = 0.1
n_particles = 20000
seed = 5
[restitution]
kind = "viscoelastic"
a = 0.1
[init]
kind = "maxwellian"
theta = 0.92
[probe]
kind = "measure_mu"
replicas = 4
[sweep]
lambdas = [0.05, 0.1, 0.2, 0.4]
"#;
    let s = scenario(text, dir.path());
    assert_eq!(Command::for_scenario(&s), Command::SweepLambda);
    let out = execute(&s, Command::SweepLambda);
    assert_eq!(out.status, Status::Ok, "{:?}", out.error);
    let sweep = fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    let v = summary(dir.path());
    let fit = &v["results"]["scaling_fit"];
    assert!(fit["gamma_hat"].is_f64() && fit["r_squared"].is_f64(), "{fit}");
    assert_eq!(v["results"]["constants"].as_array().unwrap().len(), 4);

    let files = report(dir.path()).unwrap();
    let scaling = fs::read_to_string(dir.path().join("report/scaling.csv")).unwrap();
    assert!(files.iter().any(|p| p.ends_with("scaling.csv")));
    assert!(scaling.starts_with("lambda,mu_measured,mu_err,mu_predicted,ratio,c_measured"));
    assert_eq!(scaling.lines().count(), 5);
    let flat = fs::read_to_string(dir.path().join("report/summary.csv")).unwrap();
    assert!(flat.lines().any(|l| l.starts_with("results.scaling_fit.gamma_hat,")));
}
