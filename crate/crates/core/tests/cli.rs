use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eivreg::io::{self, FitReport};
use eivreg::simulate::{self, ErrorKind, TruthTemplate};
use eivreg::ModelKind;
use tempfile::TempDir;

fn eivreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eivreg"))
        .args(args)
        .output()
        .expect("run eivreg")
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path.to_str().unwrap().to_string()
}

fn report(out: &Output) -> FitReport {
    FitReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap()
}

#[test]
fn fit_golden_intercept_instance() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "dsb.csv", "x1,x2\n0,1\n1,3\n2,5\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1", "--intercept", "--emit-means"]);
    assert_eq!(out.status.code(), Some(0));
    let rep = report(&out);
    assert_eq!(rep.schema_version, 1);
    assert_eq!(rep.model_kind, ModelKind::Intercept);
    assert!((rep.b_hat.data[0] - 2.0).abs() < 1e-10);
    assert!((rep.alpha_hat[0] - 1.0).abs() < 1e-10);
    let u1 = rep.u1_hat.unwrap().data;
    for (got, want) in u1.iter().zip([0.0, 1.0, 2.0]) {
        assert!((got - want).abs() < 1e-10);
    }
    assert!(rep.legacy_u1_hat.is_none());
    assert_eq!(rep.input_checksum, io::checksum(b"x1,x2\n0,1\n1,3\n2,5\n"));
}

#[test]
fn fit_no_intercept_has_zero_alpha() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "dsa.csv", "x1,x2\n1,2\n2,4\n3,6\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1", "--no-intercept"]);
    assert_eq!(out.status.code(), Some(0));
    let rep = report(&out);
    assert!((rep.b_hat.data[0] - 2.0).abs() < 1e-10);
    assert_eq!(rep.alpha_hat, vec![0.0]);
}

#[test]
fn fit_legacy_means_are_labeled() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "dsb.csv", "x1_a,x2_a\n0,1\n1,3\n2,5\n");
    let out = eivreg(&["fit", "--input", &input, "--intercept", "--legacy-means"]);
    assert_eq!(out.status.code(), Some(0));
    let legacy = report(&out).legacy_u1_hat.unwrap();
    assert!(legacy.note.contains("incorrect for the intercept model"));
    for (got, want) in legacy.values.data.iter().zip([-1.0, 0.0, 1.0]) {
        assert!((got - want).abs() < 1e-10);
    }
}

fn random_file(dir: &Path, p: usize, r: usize, n: usize, sigma: f64) -> String {
    let template = TruthTemplate::standard(p, r, sigma, ErrorKind::Gaussian, ModelKind::Intercept);
    let data = simulate::generate_dataset(&template.truth_for(n, 17)).unwrap();
    let path = dir.join("random.csv");
    io::write_dataset(fs::File::create(&path).unwrap(), &data).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn fit_verify_on_random_file_passes() {
    let dir = TempDir::new().unwrap();
    let input = random_file(dir.path(), 2, 2, 40, 0.2);
    let out = eivreg(&["fit", "--input", &input, "--p", "2", "--r", "2", "--intercept", "--verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let oracle = report(&out).oracle.unwrap();
    assert!(oracle.passed);
    assert_eq!(oracle.perturbation_violations, 0);
    assert!(oracle.legacy_objective_excess > 0.0);
}

#[test]
fn fit_with_sigma0_and_csv_output() {
    let dir = TempDir::new().unwrap();
    let input = random_file(dir.path(), 1, 2, 30, 0.1);
    let sigma0 = write(dir.path(), "s0.csv", "1,0.2,0\n0.2,2,0.1\n0,0.1,0.5\n");
    let target = dir.path().join("out.csv");
    let out = eivreg(&[
        "fit", "--input", &input, "--intercept", "--sigma0", &sigma0, "--verify", "--tol", "1e-8",
        "--format", "csv", "--output", target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let text = fs::read_to_string(&target).unwrap();
    assert!(text.starts_with("field,row,col,value\n"));
    assert!(text.contains("covariance,0,0,sigma0"));
    assert!(text.contains("oracle_passed,0,0,true"));
    assert_eq!(text.lines().filter(|l| l.starts_with("b_hat,")).count(), 2);
}

#[test]
fn fit_parse_error_exits_1_without_report() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "bad.csv", "x1,x2\n0,oops\n1,3\n2,5\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1", "--intercept"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("row 2") && err.contains("\"x2\""), "{err}");
}

#[test]
fn fit_dimension_mismatch_exits_1() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "wide.csv", "a,b,c\n0,1,2\n1,3,4\n2,5,6\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1", "--intercept"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn fit_unidentifiable_exits_2() {
    // All scatter is in the response, so the signal direction has no predictor part.
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "flat.csv", "x1,x2\n1,0\n1,5\n1,-3\n1,2\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1", "--intercept"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn fit_indefinite_sigma0_exits_2() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "dsb.csv", "x1,x2\n0,1\n1,3\n2,5\n");
    let sigma0 = write(dir.path(), "s0.csv", "1,2\n2,1\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1", "--intercept", "--sigma0", &sigma0]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_asymmetric_sigma0_exits_1() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "dsb.csv", "x1,x2\n0,1\n1,3\n2,5\n");
    let sigma0 = write(dir.path(), "s0.csv", "1,0.5\n0.4,1\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1", "--intercept", "--sigma0", &sigma0]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_requires_explicit_model_kind() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "dsb.csv", "x1,x2\n0,1\n1,3\n2,5\n");
    let out = eivreg(&["fit", "--input", &input, "--p", "1", "--r", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn simulate_is_deterministic_and_writes_summary() {
    let dir = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let table = dir.path().join(format!("run{run}.csv"));
        let out = eivreg(&[
            "simulate", "--p", "2", "--r", "2", "--sigma", "0.1", "--n-grid", "50,500,2000", "--reps", "50",
            "--seed", "7", "--intercept", "--output", table.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        let csv = fs::read(&table).unwrap();
        let json = fs::read(table.with_extension("json")).unwrap();
        outputs.push((csv, json));
    }
    assert_eq!(outputs[0], outputs[1]);

    let text = String::from_utf8(outputs[0].0.clone()).unwrap();
    let medians: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(medians.len(), 3);
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");

    let summary: serde_json::Value = serde_json::from_slice(&outputs[0].1).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["report"]["replicates"], 50);
}

#[test]
fn simulate_without_noise_has_zero_errors() {
    let out = eivreg(&[
        "simulate", "--p", "2", "--r", "1", "--sigma", "0", "--n-grid", "20,40", "--reps", "10", "--seed", "1",
        "--no-intercept",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[1].abs() < 1e-10 && cols[2].abs() < 1e-10 && cols[3].abs() < 1e-10, "{line}");
    }
}

#[test]
fn simulate_bad_flags_exit_1() {
    let out = eivreg(&["simulate", "--p", "2", "--r", "2", "--sigma", "0.1", "--reps", "5", "--intercept"]);
    assert_eq!(out.status.code(), Some(1));
    let out = eivreg(&["simulate", "--p", "2", "--r", "2", "--sigma", "0.1", "--error", "cauchy", "--intercept"]);
    assert_eq!(out.status.code(), Some(1));
    let out = eivreg(&["simulate", "--p", "2", "--r", "2", "--sigma", "-1", "--intercept"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_passes_and_is_deterministic() {
    let a = eivreg(&["verify", "--seed", "1", "--instances", "100"]);
    let b = eivreg(&["verify", "--seed", "1", "--instances", "100"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.contains("overall: PASS"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_zero_instances_exits_1() {
    let out = eivreg(&["verify", "--seed", "1", "--instances", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}
