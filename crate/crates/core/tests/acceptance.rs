//! Acceptance suite. Runs every primary criterion at its pinned tolerance and
//! prints one PASS/FAIL line per criterion. Exits nonzero if any fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use tempfile::TempDir;

use eivreg::linalg::{self, max_abs};
use eivreg::model::{self, EigenStructure};
use eivreg::simulate::{self, ErrorKind, SyntheticTruth, TruthTemplate};
use eivreg::verify::{self, Instance};
use eivreg::{estimators, oracle, rng, FitResult, ModelKind, ModelSpec, ObservedData};

const SEED: u64 = 20_240_501;
const INSTANCES: usize = 100;
const SIGMA: f64 = 0.5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn instances() -> Vec<Instance> {
    (0..INSTANCES)
        .map(|i| verify::random_instance(SEED, i, SIGMA, None).expect("instance"))
        .collect()
}

fn intercept_fit(data: &ObservedData) -> FitResult {
    eivreg::fit(data, &ModelSpec::new(ModelKind::Intercept)).expect("fit")
}

fn eigenstructure(data: &ObservedData, kind: ModelKind) -> EigenStructure {
    let w = model::scatter_matrix(data, kind).expect("scatter");
    model::signal_eigenstructure(&w, data.p()).expect("eigen")
}

/// Tracks the worst observed value / tolerance ratio.
#[derive(Default)]
struct Worst {
    ratio: f64,
    failures: usize,
    checked: usize,
}

impl Worst {
    fn at_most(&mut self, value: f64, tol: f64) {
        self.checked += 1;
        let ok = value <= tol;
        if !ok {
            self.failures += 1;
        }
        let ratio = if tol > 0.0 { value / tol } else if ok { 0.0 } else { f64::INFINITY };
        if ratio > self.ratio || ratio.is_nan() {
            self.ratio = ratio;
        }
    }

    fn require(&mut self, ok: bool) {
        self.checked += 1;
        if !ok {
            self.failures += 1;
        }
    }

    fn ok(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn summary(&self) -> String {
        format!("{} checked, {} failed, worst ratio {:.3e}", self.checked, self.failures, self.ratio)
    }
}

fn correction_identity(set: &[Instance]) -> Outcome {
    let start = Instant::now();
    let mut route = Worst::default();
    let mut term = Worst::default();
    for inst in set {
        let data = &inst.data;
        let fit = intercept_fit(data);
        let projected = estimators::estimate_u1_projection(data, &fit.alpha_hat, &fit.b_hat);
        route.at_most(max_abs(&(&projected - &fit.u1_hat)), 1e-9 * max_abs(&data.stacked()).max(1.0));

        let means = linalg::row_means(data.x1());
        let mean_term = DMatrix::from_fn(data.p(), data.n(), |j, _| means[j]);
        let legacy = &fit.legacy_u1_hat;
        term.at_most(max_abs(&(&fit.u1_hat - legacy - mean_term)), 1e-12 * max_abs(data.x1()).max(1.0));
    }
    let elapsed = start.elapsed();
    outcome(
        route.ok() && term.ok() && elapsed < Duration::from_secs(5),
        format!("routes: {}; mean term: {}; {:.2?}", route.summary(), term.summary(), elapsed),
    )
}

fn oracle_equivalence(set: &[Instance]) -> Outcome {
    let mut plain = Worst::default();
    for inst in set {
        let fit = intercept_fit(&inst.data);
        let u = oracle::project_columns_oracle(&inst.data, &fit.alpha_hat, &fit.b_hat, None).expect("oracle");
        plain.at_most(max_abs(&(&u - &fit.u1_hat)), 1e-9 * max_abs(&fit.u1_hat).max(1.0));
    }
    let mut weighted = Worst::default();
    for k in 0..20 {
        let index = INSTANCES + k;
        let mut srng = rng::substream(SEED, &[index as u64, 9]);
        let sigma0 = verify::random_spd(&mut srng, verify::instance_dim(SEED, index));
        let inst = verify::random_instance(SEED, index, SIGMA, Some(sigma0.clone())).expect("instance");
        let spec = ModelSpec::with_sigma0(ModelKind::Intercept, sigma0.clone()).expect("spec");
        let fit = eivreg::fit(&inst.data, &spec).expect("weighted fit");
        let u = oracle::project_columns_oracle(&inst.data, &fit.alpha_hat, &fit.b_hat, Some(&sigma0))
            .expect("metric oracle");
        weighted.at_most(max_abs(&(&u - &fit.u1_hat)), 1e-8 * max_abs(&fit.u1_hat).max(1.0));
    }
    outcome(
        plain.ok() && weighted.ok(),
        format!("identity: {}; sigma0: {}", plain.summary(), weighted.summary()),
    )
}

fn optimality(set: &[Instance]) -> Outcome {
    let mut violations = 0usize;
    let mut excess = Worst::default();
    let mut demeaned = Worst::default();
    for inst in set {
        let data = &inst.data;
        let fit = intercept_fit(data);
        let probe_seed = rng::derive_seed(SEED, &[inst.index as u64, 3]);
        let probe = oracle::perturbation_probe(data, &fit, 200, 1e-3, probe_seed).expect("probe");
        violations += probe.violations;
        if linalg::row_means(data.x1()).amax() > 0.1 {
            excess.require(probe.legacy_objective_excess > 0.0);
        }

        let means = linalg::row_means(data.x1());
        let x1 = DMatrix::from_fn(data.p(), data.n(), |j, i| data.x1()[(j, i)] - means[j]);
        let centered = ObservedData::new(x1, data.x2().clone()).expect("data");
        let cfit = intercept_fit(&centered);
        let cprobe = oracle::perturbation_probe(&centered, &cfit, 200, 1e-3, probe_seed).expect("probe");
        violations += cprobe.violations;
        demeaned.at_most(cprobe.legacy_objective_excess, 1e-12);
    }
    outcome(
        violations == 0 && excess.ok() && demeaned.ok(),
        format!(
            "violations {violations}; positive excess: {}; demeaned excess: {}",
            excess.summary(),
            demeaned.summary()
        ),
    )
}

fn stationarity(set: &[Instance]) -> Outcome {
    let mut worst = Worst::default();
    let mut skipped = 0;
    for inst in set {
        let data = &inst.data;
        let fit = intercept_fit(data);
        if fit.diagnostics.degenerate {
            skipped += 1;
            continue;
        }
        let grad = oracle::glse_gradient_check(data, &fit.alpha_hat, &fit.b_hat, 1e-6, None).expect("gradient");
        let g = oracle::stationarity_max_abs(&grad, data.r(), ModelKind::Intercept);
        worst.at_most(g, 1e-5 * fit.glse_objective.max(1.0));
    }
    outcome(worst.ok(), format!("{}; {skipped} degenerate skipped", worst.summary()))
}

fn golden() -> Outcome {
    let data = ObservedData::new(
        DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]),
        DMatrix::from_row_slice(1, 3, &[1.0, 3.0, 5.0]),
    )
    .expect("data");
    let fit = intercept_fit(&data);
    let legacy = fit.legacy_u1_hat.clone();
    let devs = [
        (fit.b_hat[(0, 0)] - 2.0).abs(),
        (fit.alpha_hat[0] - 1.0).abs(),
        max_abs(&(&fit.u1_hat - DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]))),
        max_abs(&(legacy - DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 1.0]))),
        fit.olse_objective.abs(),
    ];
    let worst = devs.iter().cloned().fold(0.0, f64::max);
    outcome(worst <= 1e-10, format!("max deviation {worst:.3e}"))
}

fn no_intercept_coincidence() -> Outcome {
    let mut worst = Worst::default();
    for i in 0..50 {
        let inst = verify::random_instance(SEED ^ 0x5a5a, i, SIGMA, None).expect("instance");
        let data = &inst.data;
        let fit = eivreg::fit(data, &ModelSpec::new(ModelKind::NoIntercept)).expect("fit");
        let legacy = estimators::legacy_u1(data, &eigenstructure(data, ModelKind::NoIntercept), ModelKind::NoIntercept);
        worst.at_most(max_abs(&(&fit.u1_hat - legacy)), 1e-12);
        worst.at_most(linalg::max_abs_vec(&fit.alpha_hat), 0.0);
    }
    outcome(worst.ok(), worst.summary())
}

fn recovery_error(truth: &SyntheticTruth, spec: &ModelSpec) -> f64 {
    let data = simulate::generate_dataset(truth).expect("data");
    let fit = eivreg::fit(&data, spec).expect("fit");
    let alpha = match spec.kind {
        ModelKind::Intercept => truth.alpha.clone(),
        ModelKind::NoIntercept => DVector::zeros(truth.b.nrows()),
    };
    max_abs(&(&fit.b_hat - &truth.b))
        .max(linalg::max_abs_vec(&(&fit.alpha_hat - alpha)))
        .max(max_abs(&(&fit.u1_hat - &truth.u1)))
}

fn noise_free_recovery() -> Outcome {
    let mut identity = Worst::default();
    let mut weighted = Worst::default();
    let mut srng = rng::substream(SEED, &[7]);
    for (p, r) in [(1, 1), (2, 1), (2, 2), (3, 2), (4, 3)] {
        for kind in [ModelKind::Intercept, ModelKind::NoIntercept] {
            let template = TruthTemplate::standard(p, r, 0.0, ErrorKind::Gaussian, kind);
            let truth = template.truth_for(40, 1);
            identity.at_most(recovery_error(&truth, &ModelSpec::new(kind)), 1e-8);

            let sigma0 = verify::random_spd(&mut srng, p + r);
            let truth = SyntheticTruth { sigma0: Some(sigma0.clone()), ..truth };
            let spec = ModelSpec::with_sigma0(kind, sigma0).expect("spec");
            weighted.at_most(recovery_error(&truth, &spec), 1e-8);
        }
    }
    outcome(
        identity.ok() && weighted.ok(),
        format!("identity: {}; sigma0: {}", identity.summary(), weighted.summary()),
    )
}

fn consistency_trend() -> Outcome {
    let start = Instant::now();
    let template = TruthTemplate::standard(2, 2, 0.1, ErrorKind::Gaussian, ModelKind::Intercept);
    let report = simulate::consistency_experiment(&template, &[50, 2000], 50, SEED).expect("experiment");
    let elapsed = start.elapsed();
    let (small, large) = (report.b_error_median[0], report.b_error_median[1]);
    let ratio = large / small;
    outcome(
        ratio <= 1.0 / 3.0 && elapsed < Duration::from_secs(60),
        format!("median {small:.4e} -> {large:.4e}, ratio {ratio:.3}; skipped {:?}; {elapsed:.2?}", report.skipped),
    )
}

fn structural_identities(set: &[Instance]) -> Outcome {
    let mut blocks = Worst::default();
    let mut gram = Worst::default();
    let mut basis = Worst::default();
    for inst in set {
        let data = &inst.data;
        let es = eigenstructure(data, ModelKind::Intercept);
        let p = data.p();
        let eye = DMatrix::<f64>::identity(p, p);
        let b = estimators::estimate_b(&es).expect("slope");

        let gg = es.g11.transpose() * &es.g11 + es.g21.transpose() * &es.g21 - &eye;
        blocks.at_most(max_abs(&gg), 1e-10);

        let inv = es.g11.clone().try_inverse().expect("invertible");
        let btb = b.transpose() * &b;
        let rhs = inv.transpose() * &inv - &eye;
        gram.at_most(max_abs(&(&btb - rhs)), 1e-9 * max_abs(&btb).max(1.0));

        let mut orng = rng::substream(SEED, &[inst.index as u64, 4]);
        let rot = verify::random_orthogonal(&mut orng, p);
        let mut g = es.g.clone();
        g.columns_mut(0, p).copy_from(&(es.signal_basis() * rot));
        let es_rot = EigenStructure::from_parts(es.w.clone(), es.eigenvalues.clone(), g, p).expect("rotated");
        let b_rot = estimators::estimate_b(&es_rot).expect("slope");
        basis.at_most(max_abs(&(&b_rot - &b)), 1e-9 * max_abs(&b).max(1.0));
    }
    outcome(
        blocks.ok() && gram.ok() && basis.ok(),
        format!("blocks: {}; gram: {}; basis: {}", blocks.summary(), gram.summary(), basis.summary()),
    )
}

fn run_binary(args: &[&str]) -> (Option<i32>, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_eivreg")).args(args).output().expect("run eivreg");
    (out.status.code(), out.stdout)
}

fn determinism() -> Outcome {
    let dir = TempDir::new().expect("tempdir");
    let mut sim = Vec::new();
    for run in 0..2 {
        let table = dir.path().join(format!("sim{run}.csv"));
        let (code, stdout) = run_binary(&[
            "simulate", "--p", "2", "--r", "2", "--sigma", "0.1", "--n-grid", "50,200", "--reps", "20", "--seed",
            "11", "--intercept", "--output", table.to_str().unwrap(),
        ]);
        let csv = fs::read(&table).unwrap_or_default();
        let json = fs::read(table.with_extension("json")).unwrap_or_default();
        sim.push((code, stdout, csv, json));
    }
    let (_, piped_a) = run_binary(&[
        "simulate", "--p", "1", "--r", "3", "--sigma", "0.3", "--error", "uniform", "--n-grid", "30,60", "--reps",
        "10", "--seed", "5", "--no-intercept",
    ]);
    let (_, piped_b) = run_binary(&[
        "simulate", "--p", "1", "--r", "3", "--sigma", "0.3", "--error", "uniform", "--n-grid", "30,60", "--reps",
        "10", "--seed", "5", "--no-intercept",
    ]);
    let verify_a = run_binary(&["verify", "--seed", "3", "--instances", "40"]);
    let verify_b = run_binary(&["verify", "--seed", "3", "--instances", "40"]);

    let sim_ok = sim[0].0 == Some(0) && !sim[0].2.is_empty() && !sim[0].3.is_empty() && sim[0] == sim[1];
    let piped_ok = !piped_a.is_empty() && piped_a == piped_b;
    let verify_ok = verify_a.0 == Some(0) && !verify_a.1.is_empty() && verify_a == verify_b;
    outcome(
        sim_ok && piped_ok && verify_ok,
        format!("simulate files {sim_ok}, simulate stdout {piped_ok}, verify {verify_ok}"),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() -> ExitCode {
    let set = instances();
    let criteria: Vec<Criterion> = vec![
        ("correction identity", Box::new(|| correction_identity(&set))),
        ("oracle equivalence", Box::new(|| oracle_equivalence(&set))),
        ("optimality", Box::new(|| optimality(&set))),
        ("glse stationarity", Box::new(|| stationarity(&set))),
        ("golden instance", Box::new(golden)),
        ("no-intercept coincidence", Box::new(no_intercept_coincidence)),
        ("noise-free recovery", Box::new(noise_free_recovery)),
        ("consistency trend", Box::new(consistency_trend)),
        ("structural identities", Box::new(|| structural_identities(&set))),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        let label = if result.passed { "PASS" } else { "FAIL" };
        println!("{label} {:>2} {name}: {}", k + 1, result.detail);
        if !result.passed {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
