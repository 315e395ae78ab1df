//! Randomized invariant suite.
//!
//! Each instance draws `p ∈ 1..=4`, `r ∈ 1..=3`, `n ∈ 10..=60`, a random
//! slope, intercept and mean vectors with nonzero row means, and Gaussian
//! errors. The fit under test is checked against the algebraic identities
//! that tie the mean-vector estimators together and against the oracle.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::estimators::{self, FitResult};
use crate::io::MatrixJson;
use crate::linalg::{self, max_abs};
use crate::model::{self, EigenStructure, ModelKind, ModelSpec, ObservedData};
use crate::oracle;
use crate::rng;
use crate::simulate::{self, ErrorKind, SyntheticTruth};

/// Signature of the fit routine under test.
pub type Fitter = fn(&ObservedData, &ModelSpec) -> Result<FitResult>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub seed: u64,
    pub instances: usize,
    pub sigma: f64,
    pub trials: usize,
}

impl VerifyConfig {
    pub fn new(seed: u64, instances: usize) -> Self {
        Self {
            seed,
            instances,
            sigma: 0.5,
            trials: 200,
        }
    }
}

/// Names of the checks in table order.
pub const CHECKS: [&str; 12] = [
    "fit_succeeds",
    "projection_matches_closed_form",
    "additional_mean_term",
    "gram_identity",
    "orthogonality_blocks",
    "no_intercept_coincidence",
    "oracle_equivalence",
    "weighted_oracle_equivalence",
    "glse_stationarity",
    "perturbation_optimality",
    "legacy_excess",
    "basis_invariance",
];

/// One check evaluated on one instance.
#[derive(Debug, Clone, Copy)]
struct Measurement {
    value: f64,
    threshold: f64,
    strict: bool,
}

impl Measurement {
    fn at_most(value: f64, threshold: f64) -> Self {
        Self { value, threshold, strict: false }
    }

    fn below(value: f64, threshold: f64) -> Self {
        Self { value, threshold, strict: true }
    }

    fn passed(&self) -> bool {
        if self.strict {
            self.value < self.threshold
        } else {
            self.value <= self.threshold
        }
    }
}

/// A randomly drawn instance with its ground truth.
#[derive(Debug, Clone)]
pub struct Instance {
    pub index: usize,
    pub truth: SyntheticTruth,
    pub data: ObservedData,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random symmetric positive-definite matrix with unit-order entries.
pub fn random_spd<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    let s = &a * a.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.5;
    linalg::symmetrize(&s)
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| normal(rng));
    a.qr().q()
}

/// Draws instance `index` of the suite seeded by `seed`.
pub fn random_instance(seed: u64, index: usize, sigma: f64, sigma0: Option<DMatrix<f64>>) -> Result<Instance> {
    let mut rng = rng::substream(seed, &[index as u64, 0]);
    let p = rng.random_range(1..=4usize);
    let r = rng.random_range(1..=3usize);
    let n = rng.random_range(10..=60usize);
    let offsets: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let u1 = DMatrix::from_fn(p, n, |j, _| offsets[j] + normal(&mut rng));
    let b = DMatrix::from_fn(r, p, |_, _| normal(&mut rng));
    let alpha = DVector::from_fn(r, |_, _| normal(&mut rng));
    let sigma0 = match sigma0 {
        Some(s) if s.nrows() != p + r => {
            return Err(EivError::DimensionMismatch("sigma0 does not match drawn p + r".into()))
        }
        other => other,
    };
    let truth = SyntheticTruth {
        u1,
        b,
        alpha,
        sigma2: sigma * sigma,
        sigma0,
        error_kind: ErrorKind::Gaussian,
        seed: rng::derive_seed(seed, &[index as u64, 1]),
    };
    let data = simulate::generate_dataset(&truth)?;
    Ok(Instance { index, truth, data })
}

/// `p + r` of instance `index`, without generating its data.
pub fn instance_dim(seed: u64, index: usize) -> usize {
    let mut rng = rng::substream(seed, &[index as u64, 0]);
    let p = rng.random_range(1..=4usize);
    let r = rng.random_range(1..=3usize);
    p + r
}

fn eigenstructure_of(data: &ObservedData, kind: ModelKind) -> Result<EigenStructure> {
    let w = model::scatter_matrix(data, kind)?;
    model::signal_eigenstructure(&w, data.p())
}

/// Evaluates every check on one instance. `None` marks a check that does
/// not apply (stationarity on a degenerate subspace, legacy excess when the
/// predictor means are tiny).
fn check_instance(inst: &Instance, cfg: &VerifyConfig, fitter: Fitter) -> Vec<Option<Measurement>> {
    let mut out = vec![None; CHECKS.len()];
    let data = &inst.data;
    let kind = ModelKind::Intercept;
    let fit = match fitter(data, &ModelSpec::new(kind)) {
        Ok(f) => f,
        Err(_) => {
            out[0] = Some(Measurement::at_most(1.0, 0.0));
            return out;
        }
    };
    let es = match eigenstructure_of(data, kind) {
        Ok(es) => es,
        Err(_) => {
            out[0] = Some(Measurement::at_most(1.0, 0.0));
            return out;
        }
    };
    out[0] = Some(Measurement::at_most(0.0, 0.0));
    let x_scale = max_abs(&data.stacked()).max(1.0);
    let p = data.p();

    // Projection route against the fitted means.
    let projected = estimators::estimate_u1_projection(data, &fit.alpha_hat, &fit.b_hat);
    out[1] = Some(Measurement::at_most(max_abs(&(&projected - &fit.u1_hat)), 1e-9 * x_scale));

    // Fitted means minus the legacy closed form is exactly the row-mean term.
    let legacy = estimators::legacy_u1(data, &es, kind);
    let means = linalg::row_means(data.x1());
    let mean_term = DMatrix::from_fn(p, data.n(), |j, _| means[j]);
    let term_dev = max_abs(&(&fit.u1_hat - &legacy - &mean_term));
    out[2] = Some(Measurement::at_most(term_dev, 1e-12 * max_abs(data.x1()).max(1.0)));

    // B̂'B̂ = (G₁₁⁻¹)' G₁₁⁻¹ − I.
    let gram = match es.g11.clone().lu().solve(&DMatrix::identity(p, p)) {
        Some(inv) => {
            let rhs = inv.transpose() * &inv - DMatrix::identity(p, p);
            let btb = fit.b_hat.transpose() * &fit.b_hat;
            Measurement::at_most(max_abs(&(&btb - rhs)), 1e-9 * max_abs(&btb).max(1.0))
        }
        None => Measurement::at_most(f64::INFINITY, 0.0),
    };
    out[3] = Some(gram);

    let blocks = es.g11.transpose() * &es.g11 + es.g21.transpose() * &es.g21 - DMatrix::identity(p, p);
    out[4] = Some(Measurement::at_most(max_abs(&blocks), 1e-10));

    out[5] = Some(match fitter(data, &ModelSpec::new(ModelKind::NoIntercept)) {
        Ok(f0) => match eigenstructure_of(data, ModelKind::NoIntercept) {
            Ok(es0) => {
                let legacy0 = estimators::legacy_u1(data, &es0, ModelKind::NoIntercept);
                Measurement::at_most(max_abs(&(&f0.u1_hat - legacy0)), 1e-12 * x_scale)
            }
            Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
        },
        Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
    });

    out[6] = Some(match oracle::project_columns_oracle(data, &fit.alpha_hat, &fit.b_hat, None) {
        Ok(u) => Measurement::at_most(max_abs(&(&u - &fit.u1_hat)), 1e-9 * max_abs(&fit.u1_hat).max(1.0)),
        Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
    });

    // Generalized path on the same data with a random covariance shape.
    let mut srng = rng::substream(cfg.seed, &[inst.index as u64, 2]);
    let sigma0 = random_spd(&mut srng, data.p() + data.r());
    out[7] = Some(
        match ModelSpec::with_sigma0(kind, sigma0.clone()).and_then(|spec| fitter(data, &spec)) {
            Ok(fw) => match oracle::project_columns_oracle(data, &fw.alpha_hat, &fw.b_hat, Some(&sigma0)) {
                Ok(u) => Measurement::at_most(max_abs(&(&u - &fw.u1_hat)), 1e-8 * max_abs(&fw.u1_hat).max(1.0)),
                Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
            },
            Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
        },
    );

    if !fit.diagnostics.degenerate {
        out[8] = Some(match oracle::glse_gradient_check(data, &fit.alpha_hat, &fit.b_hat, 1e-6, None) {
            Ok(g) => Measurement::at_most(
                oracle::stationarity_max_abs(&g, data.r(), kind),
                1e-5 * fit.glse_objective.max(1.0),
            ),
            Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
        });
    }

    let probe_seed = rng::derive_seed(cfg.seed, &[inst.index as u64, 3]);
    let probe = oracle::perturbation_probe(data, &fit, cfg.trials, 1e-3, probe_seed);
    out[9] = Some(match &probe {
        Ok(o) => Measurement::at_most(o.violations as f64, 0.0),
        Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
    });

    // The legacy means must do strictly worse once X₁ has a row mean above 0.1.
    if means.amax() > 0.1 {
        out[10] = Some(match &probe {
            Ok(o) => Measurement::below(-o.legacy_objective_excess, 0.0),
            Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
        });
    }

    let mut orng = rng::substream(cfg.seed, &[inst.index as u64, 4]);
    let rot = random_orthogonal(&mut orng, p);
    let mut g = es.g.clone();
    let rotated = es.signal_basis() * rot;
    g.columns_mut(0, p).copy_from(&rotated);
    out[11] = Some(
        match EigenStructure::from_parts(es.w.clone(), es.eigenvalues.clone(), g, p)
            .and_then(|es_rot| Ok((estimators::estimate_b(&es_rot)?, es_rot)))
        {
            Ok((b_rot, es_rot)) => {
                let u1_rot = estimators::estimate_u1_corrected(data, &es_rot, kind);
                let dev = max_abs(&(&b_rot - &fit.b_hat)).max(max_abs(&(&u1_rot - &fit.u1_hat)));
                Measurement::at_most(dev, 1e-9 * max_abs(&fit.b_hat).max(max_abs(&fit.u1_hat)).max(1.0))
            }
            Err(_) => Measurement::at_most(f64::INFINITY, 0.0),
        },
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub checked: usize,
    pub failed: usize,
    /// Largest `value / threshold` seen (0 when every value was 0).
    pub worst_ratio: f64,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

/// The first failing instance, serialized for reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub seed: u64,
    pub index: usize,
    pub check: String,
    pub p: usize,
    pub r: usize,
    pub n: usize,
    pub x1: MatrixJson,
    pub x2: MatrixJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub seed: u64,
    pub instances: usize,
    pub checks: Vec<CheckSummary>,
    pub first_failure: Option<FailureRecord>,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckSummary::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Fixed-width pass/fail table, one line per check.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {} instances {}", self.seed, self.instances);
        let _ = writeln!(s, "{:<32} {:>8} {:>8} {:>12}  result", "check", "checked", "failed", "worst/tol");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<32} {:>8} {:>8} {:>12.3e}  {}",
                c.name,
                c.checked,
                c.failed,
                c.worst_ratio,
                if c.passed() { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

fn ratio(m: &Measurement) -> f64 {
    if m.value <= 0.0 {
        0.0
    } else if m.threshold > 0.0 {
        m.value / m.threshold
    } else {
        f64::INFINITY
    }
}

/// Runs the suite with the given fit routine.
pub fn run_with(cfg: &VerifyConfig, fitter: Fitter) -> Result<VerifyOutcome> {
    if cfg.instances == 0 {
        return Err(EivError::InvalidInput("instances must be at least 1".into()));
    }
    let results: Vec<(Instance, Vec<Option<Measurement>>)> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(cfg.seed, i, cfg.sigma, None)?;
            let m = check_instance(&inst, cfg, fitter);
            Ok((inst, m))
        })
        .collect::<Result<_>>()?;

    let mut checks: Vec<CheckSummary> = CHECKS
        .iter()
        .map(|name| CheckSummary {
            name: name.to_string(),
            checked: 0,
            failed: 0,
            worst_ratio: 0.0,
        })
        .collect();
    let mut first_failure = None;
    for (inst, measurements) in &results {
        for (k, m) in measurements.iter().enumerate() {
            let Some(m) = m else { continue };
            let summary = &mut checks[k];
            summary.checked += 1;
            summary.worst_ratio = summary.worst_ratio.max(ratio(m));
            if !m.passed() {
                summary.failed += 1;
                if first_failure.is_none() {
                    first_failure = Some(FailureRecord {
                        seed: cfg.seed,
                        index: inst.index,
                        check: CHECKS[k].to_string(),
                        p: inst.data.p(),
                        r: inst.data.r(),
                        n: inst.data.n(),
                        x1: inst.data.x1().into(),
                        x2: inst.data.x2().into(),
                    });
                }
            }
        }
    }
    Ok(VerifyOutcome {
        seed: cfg.seed,
        instances: cfg.instances,
        checks,
        first_failure,
    })
}

/// Runs the suite against [`estimators::fit`].
pub fn run(cfg: &VerifyConfig) -> Result<VerifyOutcome> {
    run_with(cfg, estimators::fit)
}
