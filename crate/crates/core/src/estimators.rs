//! Closed-form estimators of `B`, `α` and the mean vectors `U₁`, `U₂`.
//!
//! With `W = G D G'` ordered descending and `G` split after row/column `p`:
//!
//! ```text
//! B̂  = G₂₁ G₁₁⁻¹
//! α̂  = x̄₂ − B̂ x̄₁            (intercept model; 0 otherwise)
//! Û₁ = n⁻¹ X₁ 1ₙ1ₙ' + (G₁₁G₁₁' X₁ + G₁₁G₂₁' X₂) Cₙ
//! Û₂ = α̂ 1ₙ' + B̂ Û₁
//! ```
//!
//! The mean estimator carries the row-mean term `n⁻¹ X₁ 1ₙ1ₙ'` in the
//! intercept model. The older closed form without it is kept as
//! [`legacy_u1`] so the difference can be demonstrated and checked; it is
//! only correct for the no-intercept model.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EivError, Result};
use crate::linalg::{self, frobenius_sq};
use crate::model::{self, EigenStructure, ModelKind, ModelSpec, ObservedData};

/// Fitted parameters, means, objectives and diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub kind: ModelKind,
    /// `Σ₀` used by the fit, `None` for identity covariance.
    pub sigma0: Option<DMatrix<f64>>,
    pub b_hat: DMatrix<f64>,
    pub alpha_hat: DVector<f64>,
    pub u1_hat: DMatrix<f64>,
    pub u2_hat: DMatrix<f64>,
    /// Mean estimate without the row-mean term. Wrong for the intercept model.
    pub legacy_u1_hat: DMatrix<f64>,
    /// `‖R‖_F²` at the fit (whitened when `Σ₀` is present).
    pub olse_objective: f64,
    /// `‖Q‖_F²` at the fit.
    pub glse_objective: f64,
    pub residual_scale: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub eigengap: f64,
    pub g11_condition: f64,
    pub degenerate: bool,
}

impl From<&EigenStructure> for Diagnostics {
    fn from(es: &EigenStructure) -> Self {
        Self {
            eigengap: es.eigengap,
            g11_condition: es.g11_condition,
            degenerate: es.degenerate,
        }
    }
}

/// The two residuals: `R` (`(p + r) × n`) and the normalized `Q` (`r × n`).
#[derive(Debug, Clone)]
pub struct ResidualPair {
    pub r_matrix: DMatrix<f64>,
    pub q_matrix: DMatrix<f64>,
}

impl ResidualPair {
    pub fn new(
        data: &ObservedData,
        alpha: &DVector<f64>,
        b: &DMatrix<f64>,
        u1: &DMatrix<f64>,
    ) -> Self {
        Self {
            r_matrix: residual_matrix(data, alpha, b, u1),
            q_matrix: glse_residual(data, alpha, b),
        }
    }
}

/// `B̂ = G₂₁ G₁₁⁻¹`, solved as `G₁₁' B̂' = G₂₁'`.
pub fn estimate_b(es: &EigenStructure) -> Result<DMatrix<f64>> {
    linalg::solve_right(&es.g11, &es.g21)
        .ok_or_else(|| EivError::Unidentifiable("G11 is singular".into()))
}

pub fn estimate_alpha(b_hat: &DMatrix<f64>, data: &ObservedData, kind: ModelKind) -> DVector<f64> {
    match kind {
        ModelKind::NoIntercept => DVector::zeros(data.r()),
        ModelKind::Intercept => {
            let xbar1 = linalg::row_means(data.x1());
            let xbar2 = linalg::row_means(data.x2());
            xbar2 - b_hat * xbar1
        }
    }
}

/// `(G₁₁G₁₁' X₁ + G₁₁G₂₁' X₂) Cₙ`, shared by both mean estimators.
fn centered_signal_projection(data: &ObservedData, es: &EigenStructure, kind: ModelKind) -> DMatrix<f64> {
    let m = &es.g11 * (es.g11.transpose() * data.x1() + es.g21.transpose() * data.x2());
    model::center_unchecked(&m, kind)
}

/// Mean-vector estimate including the row-mean term for the intercept model.
pub fn estimate_u1_corrected(data: &ObservedData, es: &EigenStructure, kind: ModelKind) -> DMatrix<f64> {
    let mut u1 = centered_signal_projection(data, es, kind);
    if kind == ModelKind::Intercept {
        let means = linalg::row_means(data.x1());
        for (mut row, mean) in u1.row_iter_mut().zip(means.iter()) {
            row.add_scalar_mut(*mean);
        }
    }
    u1
}

/// The older closed form `(G₁₁G₁₁' X₁ + G₁₁G₂₁' X₂) Cₙ`.
///
/// Known to be incorrect for the intercept model: it drops `n⁻¹ X₁ 1ₙ1ₙ'`.
pub fn legacy_u1(data: &ObservedData, es: &EigenStructure, kind: ModelKind) -> DMatrix<f64> {
    centered_signal_projection(data, es, kind)
}

/// `(I_p + B̂'B̂)⁻¹ (I_p, B̂') (X − (0; α̂ 1ₙ'))`, via a Cholesky solve.
pub fn estimate_u1_projection(
    data: &ObservedData,
    alpha_hat: &DVector<f64>,
    b_hat: &DMatrix<f64>,
) -> DMatrix<f64> {
    let p = data.p();
    let mut shifted = data.x2().clone();
    for (mut row, a) in shifted.row_iter_mut().zip(alpha_hat.iter()) {
        row.add_scalar_mut(-a);
    }
    let rhs = data.x1() + b_hat.transpose() * shifted;
    let gram = DMatrix::identity(p, p) + b_hat.transpose() * b_hat;
    gram.cholesky()
        .expect("I + B'B is positive definite")
        .solve(&rhs)
}

/// `Û₂ = α̂ 1ₙ' + B̂ Û₁`.
pub fn estimate_u2(u1_hat: &DMatrix<f64>, alpha_hat: &DVector<f64>, b_hat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut u2 = b_hat * u1_hat;
    for (mut row, a) in u2.row_iter_mut().zip(alpha_hat.iter()) {
        row.add_scalar_mut(*a);
    }
    u2
}

/// `R = X − (0; α 1ₙ') − (I_p; B) U₁`.
pub fn residual_matrix(
    data: &ObservedData,
    alpha: &DVector<f64>,
    b: &DMatrix<f64>,
    u1: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (p, r, n) = (data.p(), data.r(), data.n());
    let mut res = DMatrix::zeros(p + r, n);
    res.rows_mut(0, p).copy_from(&(data.x1() - u1));
    res.rows_mut(p, r).copy_from(&(data.x2() - estimate_u2(u1, alpha, b)));
    res
}

/// `X₂ − α 1ₙ' − B X₁`.
fn response_residual(data: &ObservedData, alpha: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = data.x2() - b * data.x1();
    for (mut row, a) in z.row_iter_mut().zip(alpha.iter()) {
        row.add_scalar_mut(-a);
    }
    z
}

/// Inverse symmetric square root of a symmetric positive-definite matrix.
fn inv_sqrt_spd(k: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(k);
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `Q = (I_r + BB')^{-1/2} (X₂ − α 1ₙ' − B X₁)` with the symmetric root.
pub fn glse_residual(data: &ObservedData, alpha: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let r = data.r();
    let k = DMatrix::identity(r, r) + b * b.transpose();
    inv_sqrt_spd(k) * response_residual(data, alpha, b)
}

/// Normalized residual under error covariance shape `Σ₀`:
/// `K^{-1/2} (X₂ − α 1ₙ' − B X₁)` with `K = (−B, I_r) Σ₀ (−B, I_r)'`.
///
/// Reduces to [`glse_residual`] when `Σ₀ = I`.
pub fn glse_residual_weighted(
    data: &ObservedData,
    alpha: &DVector<f64>,
    b: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (p, r) = (data.p(), data.r());
    let mut c = DMatrix::zeros(r, p + r);
    c.columns_mut(0, p).copy_from(&(-b));
    c.columns_mut(p, r).fill_with_identity();
    let k = linalg::symmetrize(&(&c * sigma0 * c.transpose()));
    inv_sqrt_spd(k) * response_residual(data, alpha, b)
}

/// `‖R‖_F² / (n (p + r))`. A scale diagnostic, not an estimator of σ².
pub fn residual_scale(r_matrix: &DMatrix<f64>) -> f64 {
    let count = r_matrix.len();
    if count == 0 {
        return 0.0;
    }
    frobenius_sq(r_matrix) / count as f64
}

/// Symmetric square-root factors of `Σ₀`, used to whiten and un-whiten.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub sigma0: DMatrix<f64>,
    pub root: DMatrix<f64>,
    pub inv_root: DMatrix<f64>,
}

impl Whitener {
    pub fn new(sigma0: &DMatrix<f64>) -> Result<Self> {
        model::validate_sigma0(sigma0)?;
        let (root, inv_root) = linalg::spd_roots(sigma0)?;
        Ok(Self {
            sigma0: sigma0.clone(),
            root,
            inv_root,
        })
    }

    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.inv_root * x
    }
}

/// Projects the columns of `y` (already shifted by the intercept) onto
/// `span (I_p; B)` in the `Σ₀⁻¹` metric and returns the `U₁` coordinates.
fn weighted_projection(y: &DMatrix<f64>, b: &DMatrix<f64>, wh: &Whitener) -> Result<DMatrix<f64>> {
    let p = b.ncols();
    let r = b.nrows();
    let mut basis = DMatrix::zeros(p + r, p);
    basis.rows_mut(0, p).fill_with_identity();
    basis.rows_mut(p, r).copy_from(b);
    let a_w = wh.whiten(&basis);
    let y_w = wh.whiten(y);
    let coords = (a_w.transpose() * &a_w)
        .cholesky()
        .ok_or_else(|| EivError::Unidentifiable("whitened signal basis is rank deficient".into()))?
        .solve(&(a_w.transpose() * y_w));
    // Un-whiten the projected points and read off the top p rows.
    let projected = &wh.root * (&a_w * coords);
    Ok(projected.rows(0, p).into_owned())
}

/// Fits the model. Uses the identity-covariance closed forms unless
/// `spec.sigma0` is present, in which case the data are whitened first.
pub fn fit(data: &ObservedData, spec: &ModelSpec) -> Result<FitResult> {
    data.check_for(spec.kind)?;
    match &spec.sigma0 {
        None => fit_identity(data, spec.kind),
        Some(sigma0) => fit_weighted(data, spec.kind, sigma0),
    }
}

fn fit_identity(data: &ObservedData, kind: ModelKind) -> Result<FitResult> {
    let w = model::scatter_matrix(data, kind)?;
    let es = model::signal_eigenstructure(&w, data.p())?;
    let b_hat = estimate_b(&es)?;
    let alpha_hat = estimate_alpha(&b_hat, data, kind);
    let u1_hat = estimate_u1_corrected(data, &es, kind);
    let legacy_u1_hat = legacy_u1(data, &es, kind);
    let u2_hat = estimate_u2(&u1_hat, &alpha_hat, &b_hat);
    let res = ResidualPair::new(data, &alpha_hat, &b_hat, &u1_hat);
    Ok(FitResult {
        kind,
        sigma0: None,
        olse_objective: frobenius_sq(&res.r_matrix),
        glse_objective: frobenius_sq(&res.q_matrix),
        residual_scale: residual_scale(&res.r_matrix),
        diagnostics: Diagnostics::from(&es),
        b_hat,
        alpha_hat,
        u1_hat,
        u2_hat,
        legacy_u1_hat,
    })
}

fn fit_weighted(data: &ObservedData, kind: ModelKind, sigma0: &DMatrix<f64>) -> Result<FitResult> {
    let (p, r) = (data.p(), data.r());
    if sigma0.shape() != (p + r, p + r) {
        return Err(EivError::DimensionMismatch(format!(
            "sigma0 is {}x{} but p + r = {}",
            sigma0.nrows(),
            sigma0.ncols(),
            p + r
        )));
    }
    let wh = Whitener::new(sigma0)?;
    let x = data.stacked();
    let x_w = wh.whiten(&x);
    let w_w = model::scatter_of_stacked(&x_w, kind)?;
    let es_w = model::signal_eigenstructure(&w_w, p)?;

    // Map the whitened signal basis back and read the slope off its blocks.
    let m = &wh.root * es_w.signal_basis();
    let m1 = m.rows(0, p).into_owned();
    let m2 = m.rows(p, r).into_owned();
    let m1_cond = linalg::condition_number(&m1);
    if m1_cond.is_nan() || m1_cond > model::MAX_G11_CONDITION {
        return Err(EivError::Unidentifiable(format!(
            "mapped signal block has condition number {m1_cond:e}"
        )));
    }
    let b_hat = linalg::solve_right(&m1, &m2)
        .ok_or_else(|| EivError::Unidentifiable("mapped signal block is singular".into()))?;
    let alpha_hat = estimate_alpha(&b_hat, data, kind);

    let mut shifted = x.clone();
    for (mut row, a) in shifted.rows_mut(p, r).row_iter_mut().zip(alpha_hat.iter()) {
        row.add_scalar_mut(-a);
    }
    let u1_hat = weighted_projection(&shifted, &b_hat, &wh)?;
    let legacy_u1_hat = weighted_projection(&model::center_unchecked(&x, kind), &b_hat, &wh)?;
    let u2_hat = estimate_u2(&u1_hat, &alpha_hat, &b_hat);

    let r_w = wh.whiten(&residual_matrix(data, &alpha_hat, &b_hat, &u1_hat));
    let q = glse_residual_weighted(data, &alpha_hat, &b_hat, sigma0);
    Ok(FitResult {
        kind,
        sigma0: Some(sigma0.clone()),
        olse_objective: frobenius_sq(&r_w),
        glse_objective: frobenius_sq(&q),
        residual_scale: residual_scale(&r_w),
        diagnostics: Diagnostics {
            eigengap: es_w.eigengap,
            g11_condition: es_w.g11_condition,
            degenerate: es_w.degenerate,
        },
        b_hat,
        alpha_hat,
        u1_hat,
        u2_hat,
        legacy_u1_hat,
    })
}
