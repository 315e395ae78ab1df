//! Synthetic data from the functional model and Monte Carlo consistency runs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::estimators::{self, estimate_u2};
use crate::linalg::frobenius_sq;
use crate::model::{ModelKind, ModelSpec, ObservedData};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Gaussian,
    /// Independent centered uniforms with unit variance, then correlated
    /// through the Cholesky factor of `Σ₀`.
    UniformCentered,
}

/// Ground truth for one synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub u1: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub alpha: DVector<f64>,
    /// Error variance σ². Zero gives noise-free data.
    pub sigma2: f64,
    /// Covariance shape; identity when `None`.
    pub sigma0: Option<DMatrix<f64>>,
    pub error_kind: ErrorKind,
    pub seed: u64,
}

impl SyntheticTruth {
    pub fn u2(&self) -> DMatrix<f64> {
        estimate_u2(&self.u1, &self.alpha, &self.b)
    }

    fn validate(&self) -> Result<()> {
        let (p, n) = self.u1.shape();
        let r = self.b.nrows();
        if self.b.ncols() != p || self.alpha.len() != r {
            return Err(EivError::DimensionMismatch(format!(
                "u1 is {p}x{n}, b is {}x{}, alpha has length {}",
                self.b.nrows(),
                self.b.ncols(),
                self.alpha.len()
            )));
        }
        if !self.sigma2.is_finite() || self.sigma2 < 0.0 {
            return Err(EivError::InvalidInput(format!("sigma2 = {} must be >= 0", self.sigma2)));
        }
        if let Some(s) = &self.sigma0 {
            if s.shape() != (p + r, p + r) {
                return Err(EivError::DimensionMismatch("sigma0 must be (p+r)x(p+r)".into()));
            }
        }
        Ok(())
    }
}

/// Draws `X = U + E` and also returns the realized `E`.
pub fn generate_with_errors(truth: &SyntheticTruth) -> Result<(ObservedData, DMatrix<f64>)> {
    truth.validate()?;
    let (p, n) = truth.u1.shape();
    let r = truth.b.nrows();
    let m = p + r;
    let factor = match &truth.sigma0 {
        None => DMatrix::identity(m, m),
        Some(s) => s
            .clone()
            .cholesky()
            .ok_or_else(|| EivError::NotPositiveDefinite("sigma0".into()))?
            .l(),
    };
    let sigma = truth.sigma2.sqrt();
    let half_width = 3.0_f64.sqrt();

    let mut rng = rng::substream(truth.seed, &[]);
    let mut errors = DMatrix::zeros(m, n);
    for i in 0..n {
        let z = DVector::from_iterator(
            m,
            (0..m).map(|_| match truth.error_kind {
                ErrorKind::Gaussian => StandardNormal.sample(&mut rng),
                ErrorKind::UniformCentered => rng.random_range(-half_width..half_width),
            }),
        );
        errors.set_column(i, &(&factor * z * sigma));
    }

    let mut x = DMatrix::zeros(m, n);
    x.rows_mut(0, p).copy_from(&truth.u1);
    x.rows_mut(p, r).copy_from(&truth.u2());
    x += &errors;
    Ok((ObservedData::from_stacked(&x, p)?, errors))
}

pub fn generate_dataset(truth: &SyntheticTruth) -> Result<ObservedData> {
    Ok(generate_with_errors(truth)?.0)
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// Halton points `center + spread · [−1, 1]^p`, one per column, starting at
/// index 1.
pub fn halton_grid(p: usize, n: usize, spread: f64, center: &DVector<f64>) -> DMatrix<f64> {
    assert!(p <= PRIMES.len(), "halton grid supports p <= {}", PRIMES.len());
    DMatrix::from_fn(p, n, |j, i| {
        center[j] + spread * (2.0 * radical_inverse(i as u64 + 1, PRIMES[j]) - 1.0)
    })
}

/// Rule for building a [`SyntheticTruth`] at any sample size.
#[derive(Debug, Clone)]
pub struct TruthTemplate {
    pub kind: ModelKind,
    pub b: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub sigma2: f64,
    pub sigma0: Option<DMatrix<f64>>,
    pub error_kind: ErrorKind,
    pub spread: f64,
    /// Center of the mean-vector grid; nonzero so `X₁` has nonzero row means.
    pub center: DVector<f64>,
}

impl TruthTemplate {
    /// Fixed parameters used by the command-line experiments:
    /// `B[i][j] = 1 / (1 + i + j)`, `α[i] = (i + 1) / 2` (zero without intercept),
    /// grid spread 1 centered at `(1, …, 1)`.
    pub fn standard(p: usize, r: usize, sigma: f64, error_kind: ErrorKind, kind: ModelKind) -> Self {
        let b = DMatrix::from_fn(r, p, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let alpha = match kind {
            ModelKind::Intercept => DVector::from_fn(r, |i, _| 0.5 * (i as f64 + 1.0)),
            ModelKind::NoIntercept => DVector::zeros(r),
        };
        Self {
            kind,
            b,
            alpha,
            sigma2: sigma * sigma,
            sigma0: None,
            error_kind,
            spread: 1.0,
            center: DVector::from_element(p, 1.0),
        }
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn r(&self) -> usize {
        self.b.nrows()
    }

    pub fn truth_for(&self, n: usize, seed: u64) -> SyntheticTruth {
        SyntheticTruth {
            u1: halton_grid(self.p(), n, self.spread, &self.center),
            b: self.b.clone(),
            alpha: self.alpha.clone(),
            sigma2: self.sigma2,
            sigma0: self.sigma0.clone(),
            error_kind: self.error_kind,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_grid: Vec<usize>,
    /// Median of `‖B̂ − B‖_F` over replicates, per sample size.
    pub b_error_median: Vec<f64>,
    /// `sqrt(mean ‖Û₁ − U₁‖_F² / (p n))`, per sample size.
    pub u1_rmse_corrected: Vec<f64>,
    pub u1_rmse_legacy: Vec<f64>,
    /// Replicates skipped as unidentifiable, per sample size.
    pub skipped: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

struct ReplicateErrors {
    b_error: f64,
    u1_sq_corrected: f64,
    u1_sq_legacy: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Fits `replicates` synthetic datasets at each sample size in `n_grid`.
///
/// Replicate `j` at size `n` uses the data seed `(seed, n, j)`. Unidentifiable
/// replicates are skipped and counted; more than 10% skipped is an error.
pub fn consistency_experiment(
    template: &TruthTemplate,
    n_grid: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    let (p, r) = (template.p(), template.r());
    if replicates < 10 {
        return Err(EivError::InvalidInput(format!(
            "need at least 10 replicates, got {replicates}"
        )));
    }
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EivError::InvalidInput("n grid must be non-empty and strictly increasing".into()));
    }
    if let Some(&n) = n_grid.iter().find(|&&n| n < p + r + 2) {
        return Err(EivError::InvalidInput(format!("n = {n} is below p + r + 2 = {}", p + r + 2)));
    }
    let spec = ModelSpec {
        kind: template.kind,
        sigma0: template.sigma0.clone(),
    };

    let mut report = ConsistencyReport {
        n_grid: n_grid.to_vec(),
        b_error_median: Vec::with_capacity(n_grid.len()),
        u1_rmse_corrected: Vec::with_capacity(n_grid.len()),
        u1_rmse_legacy: Vec::with_capacity(n_grid.len()),
        skipped: Vec::with_capacity(n_grid.len()),
        replicates,
        seed,
    };

    for &n in n_grid {
        let outcomes: Vec<Result<Option<ReplicateErrors>>> = (0..replicates)
            .into_par_iter()
            .map(|j| {
                let truth = template.truth_for(n, rng::derive_seed(seed, &[n as u64, j as u64]));
                let data = generate_dataset(&truth)?;
                match estimators::fit(&data, &spec) {
                    Ok(fit) => Ok(Some(ReplicateErrors {
                        b_error: frobenius_sq(&(&fit.b_hat - &truth.b)).sqrt(),
                        u1_sq_corrected: frobenius_sq(&(&fit.u1_hat - &truth.u1)),
                        u1_sq_legacy: frobenius_sq(&(&fit.legacy_u1_hat - &truth.u1)),
                    })),
                    Err(EivError::Unidentifiable(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();

        let mut kept = Vec::with_capacity(replicates);
        for outcome in outcomes {
            if let Some(errs) = outcome? {
                kept.push(errs);
            }
        }
        let skipped = replicates - kept.len();
        if skipped * 10 > replicates {
            return Err(EivError::TooManySkipped {
                skipped,
                total: replicates,
            });
        }

        let denom = kept.len() as f64 * (p * n) as f64;
        let mut b_errors: Vec<f64> = kept.iter().map(|e| e.b_error).collect();
        report.b_error_median.push(median(&mut b_errors));
        report
            .u1_rmse_corrected
            .push((kept.iter().map(|e| e.u1_sq_corrected).sum::<f64>() / denom).sqrt());
        report
            .u1_rmse_legacy
            .push((kept.iter().map(|e| e.u1_sq_legacy).sum::<f64>() / denom).sqrt());
        report.skipped.push(skipped);
    }
    Ok(report)
}
