//! Independent checks of a fit.
//!
//! Nothing here goes through the closed forms in [`crate::estimators`]:
//! the mean vectors are recomputed column by column from hand-assembled
//! normal equations, stationarity of the GLSE criterion is probed with
//! central differences, and OLSE optimality with random perturbations.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::estimators::{glse_residual, glse_residual_weighted, FitResult};
use crate::linalg::{self, frobenius_sq};
use crate::model::{ModelKind, ObservedData};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// `max |Û₁(oracle) − Û₁(fit)|`.
    pub max_abs_deviation: f64,
    /// Largest free component of the finite-difference GLSE gradient.
    pub gradient_max_abs: f64,
    pub perturbation_violations: usize,
    /// OLSE objective at the legacy means minus the objective at the fitted means.
    pub legacy_objective_excess: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Relative tolerance on the mean-vector deviation, scaled by `max(1, ‖Û₁‖_max)`.
    pub tol: f64,
    pub gradient_step: f64,
    /// Gradient tolerance factor, scaled by `max(1, objective)`.
    pub gradient_tol: f64,
    pub trials: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            gradient_step: 1e-6,
            gradient_tol: 1e-5,
            trials: 200,
            scale: 1e-3,
            seed: 0,
        }
    }
}

/// Inverse of an SPD matrix by Cholesky, or `None` if it is not SPD.
fn precision_of(sigma0: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = sigma0.nrows();
    let chol = sigma0.clone().cholesky()?;
    Some(linalg::symmetrize(&chol.solve(&DMatrix::identity(n, n))))
}

/// Per-column generalized least-squares projection onto the affine model
/// `{(0; α) + (I; B) u}` in the `Σ₀⁻¹` metric (`Σ₀ = I` when absent).
pub fn project_columns_oracle(
    data: &ObservedData,
    alpha: &DVector<f64>,
    b: &DMatrix<f64>,
    sigma0: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let (p, r, n) = (data.p(), data.r(), data.n());
    let m = p + r;
    let precision = match sigma0 {
        None => DMatrix::identity(m, m),
        Some(s) => precision_of(s).ok_or_else(|| EivError::NotPositiveDefinite("sigma0".into()))?,
    };

    // Entry (s, j) of the stacked design (I_p; B).
    let design = |s: usize, j: usize| -> f64 {
        if s < p {
            if s == j {
                1.0
            } else {
                0.0
            }
        } else {
            b[(s - p, j)]
        }
    };
    let offset = |s: usize| -> f64 {
        if s < p {
            0.0
        } else {
            alpha[s - p]
        }
    };

    // weights[(j, t)] = Σ_s A[s][j] P[s][t]
    let mut weights = DMatrix::zeros(p, m);
    for j in 0..p {
        for t in 0..m {
            let mut acc = 0.0;
            for s in 0..m {
                acc += design(s, j) * precision[(s, t)];
            }
            weights[(j, t)] = acc;
        }
    }
    let mut normal = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in 0..p {
            let mut acc = 0.0;
            for t in 0..m {
                acc += weights[(j, t)] * design(t, k);
            }
            normal[(j, k)] = acc;
        }
    }
    let lu = normal.lu();

    let mut u1 = DMatrix::zeros(p, n);
    for i in 0..n {
        let mut rhs = DVector::zeros(p);
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..m {
                let x = if t < p { data.x1()[(t, i)] } else { data.x2()[(t - p, i)] };
                acc += weights[(j, t)] * (x - offset(t));
            }
            rhs[j] = acc;
        }
        let col = lu
            .solve(&rhs)
            .ok_or_else(|| EivError::Unidentifiable("normal equations are singular".into()))?;
        u1.set_column(i, &col);
    }
    Ok(u1)
}

fn glse_objective(
    data: &ObservedData,
    alpha: &DVector<f64>,
    b: &DMatrix<f64>,
    sigma0: Option<&DMatrix<f64>>,
) -> f64 {
    match sigma0 {
        None => frobenius_sq(&glse_residual(data, alpha, b)),
        Some(s) => frobenius_sq(&glse_residual_weighted(data, alpha, b, s)),
    }
}

/// Central-difference gradient of `‖Q(α, B)‖_F²`.
///
/// Layout: the `r` components of `α`, then `B` in row-major order.
pub fn glse_gradient_check(
    data: &ObservedData,
    alpha: &DVector<f64>,
    b: &DMatrix<f64>,
    step: f64,
    sigma0: Option<&DMatrix<f64>>,
) -> Result<Vec<f64>> {
    if !(1e-9..=1e-3).contains(&step) {
        return Err(EivError::InvalidInput(format!(
            "finite-difference step {step:e} outside [1e-9, 1e-3]"
        )));
    }
    let (p, r) = (data.p(), data.r());
    let mut grad = Vec::with_capacity(r + r * p);
    for k in 0..r {
        let mut plus = alpha.clone();
        let mut minus = alpha.clone();
        plus[k] += step;
        minus[k] -= step;
        let f_plus = glse_objective(data, &plus, b, sigma0);
        let f_minus = glse_objective(data, &minus, b, sigma0);
        grad.push((f_plus - f_minus) / (2.0 * step));
    }
    for i in 0..r {
        for j in 0..p {
            let mut plus = b.clone();
            let mut minus = b.clone();
            plus[(i, j)] += step;
            minus[(i, j)] -= step;
            let f_plus = glse_objective(data, alpha, &plus, sigma0);
            let f_minus = glse_objective(data, alpha, &minus, sigma0);
            grad.push((f_plus - f_minus) / (2.0 * step));
        }
    }
    Ok(grad)
}

/// Largest gradient component over the free parameters: `α` is held at
/// zero in the no-intercept model and is excluded there.
pub fn stationarity_max_abs(grad: &[f64], r: usize, kind: ModelKind) -> f64 {
    let skip = match kind {
        ModelKind::Intercept => 0,
        ModelKind::NoIntercept => r,
    };
    grad.iter().skip(skip).fold(0.0_f64, |acc, g| acc.max(g.abs()))
}

/// OLSE objective `Σᵢ rᵢ' Σ₀⁻¹ rᵢ` of a residual matrix.
fn metric_norm_sq(res: &DMatrix<f64>, precision: Option<&DMatrix<f64>>) -> f64 {
    match precision {
        None => frobenius_sq(res),
        Some(pm) => res.component_mul(&(pm * res)).sum(),
    }
}

/// `⟨a, b⟩` in the same metric.
fn metric_inner(a: &DMatrix<f64>, b: &DMatrix<f64>, precision: Option<&DMatrix<f64>>) -> f64 {
    match precision {
        None => a.component_mul(b).sum(),
        Some(pm) => a.component_mul(&(pm * b)).sum(),
    }
}

fn olse_residual(data: &ObservedData, alpha: &DVector<f64>, b: &DMatrix<f64>, u1: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, r) = (data.p(), data.r());
    let mut res = data.stacked();
    let fitted2 = b * u1;
    for i in 0..data.n() {
        for s in 0..p {
            res[(s, i)] -= u1[(s, i)];
        }
        for s in 0..r {
            res[(p + s, i)] -= alpha[s] + fitted2[(s, i)];
        }
    }
    res
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationOutcome {
    pub trials: usize,
    pub violations: usize,
    pub legacy_objective_excess: f64,
}

/// Random perturbations of `(α, B, U₁)` around the fit; counts how many
/// reach a lower OLSE objective than the fit itself.
///
/// `α` is only perturbed in the intercept model. Trial `t` draws from the
/// substream `(seed, t)`, so results do not depend on scheduling.
pub fn perturbation_probe(
    data: &ObservedData,
    fit: &FitResult,
    trials: usize,
    scale: f64,
    seed: u64,
) -> Result<PerturbationOutcome> {
    if trials == 0 {
        return Err(EivError::InvalidInput("trials must be at least 1".into()));
    }
    if scale.is_nan() || scale <= 0.0 {
        return Err(EivError::InvalidInput("perturbation scale must be positive".into()));
    }
    let precision = match &fit.sigma0 {
        None => None,
        Some(s) => Some(precision_of(s).ok_or_else(|| EivError::NotPositiveDefinite("sigma0".into()))?),
    };
    let precision = precision.as_ref();

    let fitted_res = olse_residual(data, &fit.alpha_hat, &fit.b_hat, &fit.u1_hat);
    let fitted = metric_norm_sq(&fitted_res, precision);
    let slack = 1e-12 * fitted.max(1.0);

    let jitter = |v: f64, rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        v + scale * (1.0 + v.abs()) * z
    };

    let violations = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let mut rng = rng::substream(seed, &[t as u64]);
            let alpha = match fit.kind {
                ModelKind::Intercept => fit.alpha_hat.map(|v| jitter(v, &mut rng)),
                ModelKind::NoIntercept => fit.alpha_hat.clone(),
            };
            let b = fit.b_hat.map(|v| jitter(v, &mut rng));
            let u1 = fit.u1_hat.map(|v| jitter(v, &mut rng));
            let perturbed = metric_norm_sq(&olse_residual(data, &alpha, &b, &u1), precision);
            perturbed < fitted - slack
        })
        .count();

    // R(legacy) = R(fit) + (I; B̂)(Û₁ − legacy), expanded to avoid cancellation.
    let diff = &fit.u1_hat - &fit.legacy_u1_hat;
    let (p, r) = (data.p(), data.r());
    let mut shift = DMatrix::zeros(p + r, data.n());
    shift.rows_mut(0, p).copy_from(&diff);
    shift.rows_mut(p, r).copy_from(&(&fit.b_hat * &diff));
    let legacy_objective_excess =
        2.0 * metric_inner(&fitted_res, &shift, precision) + metric_norm_sq(&shift, precision);

    Ok(PerturbationOutcome {
        trials,
        violations,
        legacy_objective_excess,
    })
}

/// Runs all three checks on a fit and combines them into a report.
pub fn certify(data: &ObservedData, fit: &FitResult, cfg: &OracleConfig) -> Result<OracleReport> {
    let oracle_u1 = project_columns_oracle(data, &fit.alpha_hat, &fit.b_hat, fit.sigma0.as_ref())?;
    let max_abs_deviation = linalg::max_abs(&(&oracle_u1 - &fit.u1_hat));

    let grad = glse_gradient_check(data, &fit.alpha_hat, &fit.b_hat, cfg.gradient_step, fit.sigma0.as_ref())?;
    let gradient_max_abs = stationarity_max_abs(&grad, data.r(), fit.kind);

    let probe = perturbation_probe(data, fit, cfg.trials, cfg.scale, cfg.seed)?;

    let passed = max_abs_deviation <= cfg.tol * linalg::max_abs(&fit.u1_hat).max(1.0)
        && gradient_max_abs <= cfg.gradient_tol * fit.glse_objective.max(1.0)
        && probe.violations == 0
        && probe.legacy_objective_excess >= -1e-12;

    Ok(OracleReport {
        max_abs_deviation,
        gradient_max_abs,
        perturbation_violations: probe.violations,
        legacy_objective_excess: probe.legacy_objective_excess,
        passed,
    })
}
