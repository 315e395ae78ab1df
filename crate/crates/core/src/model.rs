//! Observed data, centering, the scatter matrix and its ordered eigenstructure.
//!
//! The observations are held as two column-aligned blocks: `x1` (`p × n`,
//! predictors) and `x2` (`r × n`, responses). Column `i` of the stacked
//! matrix `X = (X₁; X₂)` is observation `i`.
//!
//! The fitted signal subspace is spanned by the `p` leading eigenvectors of
//! the centered scatter `W = (X Cₙ)(X Cₙ)'`, where `Cₙ` is the identity for the
//! no-intercept model and the row-mean-removing projector for the intercept
//! model.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{EivError, Result};
use crate::linalg;

/// Relative eigengap below which the signal subspace is flagged as degenerate.
pub const DEGENERATE_GAP_REL: f64 = 1e-10;
/// Condition number of `G₁₁` above which the slope is declared unidentifiable.
pub const MAX_G11_CONDITION: f64 = 1e12;
/// Relative asymmetry tolerated on input to [`signal_eigenstructure`].
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `α` is known to be zero; `Cₙ = Iₙ`.
    NoIntercept,
    /// `α` is estimated; `Cₙ = Iₙ − n⁻¹ 1ₙ1ₙ'`.
    Intercept,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::NoIntercept => "no_intercept",
            ModelKind::Intercept => "intercept",
        }
    }
}

/// Observation blocks `X₁` (`p × n`) and `X₂` (`r × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    x1: DMatrix<f64>,
    x2: DMatrix<f64>,
}

impl ObservedData {
    pub fn new(x1: DMatrix<f64>, x2: DMatrix<f64>) -> Result<Self> {
        if x1.nrows() == 0 || x2.nrows() == 0 {
            return Err(EivError::InvalidInput(
                "both p and r must be at least 1".into(),
            ));
        }
        if x1.ncols() != x2.ncols() {
            return Err(EivError::DimensionMismatch(format!(
                "x1 has {} columns but x2 has {}",
                x1.ncols(),
                x2.ncols()
            )));
        }
        if x1.ncols() < 2 {
            return Err(EivError::InvalidInput(format!(
                "need at least 2 observations, got {}",
                x1.ncols()
            )));
        }
        if !linalg::all_finite(&x1) || !linalg::all_finite(&x2) {
            return Err(EivError::InvalidInput("observations must be finite".into()));
        }
        Ok(Self { x1, x2 })
    }

    /// Splits a stacked `(p + r) × n` matrix after its first `p` rows.
    pub fn from_stacked(x: &DMatrix<f64>, p: usize) -> Result<Self> {
        if p == 0 || p >= x.nrows() {
            return Err(EivError::DimensionMismatch(format!(
                "cannot split {} rows with p = {p}",
                x.nrows()
            )));
        }
        let r = x.nrows() - p;
        Self::new(x.rows(0, p).into_owned(), x.rows(p, r).into_owned())
    }

    pub fn x1(&self) -> &DMatrix<f64> {
        &self.x1
    }

    pub fn x2(&self) -> &DMatrix<f64> {
        &self.x2
    }

    pub fn p(&self) -> usize {
        self.x1.nrows()
    }

    pub fn r(&self) -> usize {
        self.x2.nrows()
    }

    pub fn n(&self) -> usize {
        self.x1.ncols()
    }

    /// The stacked `(p + r) × n` matrix `X`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (p, r, n) = (self.p(), self.r(), self.n());
        let mut x = DMatrix::zeros(p + r, n);
        x.rows_mut(0, p).copy_from(&self.x1);
        x.rows_mut(p, r).copy_from(&self.x2);
        x
    }

    /// Sample mean `x̄ = n⁻¹ X 1ₙ` of the stacked observations.
    pub fn mean(&self) -> DVector<f64> {
        linalg::row_means(&self.stacked())
    }

    /// Checks the sample-size requirement of the given model kind.
    pub fn check_for(&self, kind: ModelKind) -> Result<()> {
        if kind == ModelKind::Intercept && self.n() < self.p() + 1 {
            return Err(EivError::InvalidInput(format!(
                "intercept model needs n >= p + 1 (n = {}, p = {})",
                self.n(),
                self.p()
            )));
        }
        Ok(())
    }
}

/// Model kind plus the optional known error-covariance shape `Σ₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub sigma0: Option<DMatrix<f64>>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self { kind, sigma0: None }
    }

    /// Attaches `Σ₀`, checking symmetry (to 1e-12 relative) and positive
    /// definiteness.
    pub fn with_sigma0(kind: ModelKind, sigma0: DMatrix<f64>) -> Result<Self> {
        validate_sigma0(&sigma0)?;
        Ok(Self {
            kind,
            sigma0: Some(sigma0),
        })
    }
}

pub(crate) fn validate_sigma0(sigma0: &DMatrix<f64>) -> Result<()> {
    if !sigma0.is_square() {
        return Err(EivError::DimensionMismatch(format!(
            "sigma0 must be square, got {}x{}",
            sigma0.nrows(),
            sigma0.ncols()
        )));
    }
    if !linalg::all_finite(sigma0) {
        return Err(EivError::InvalidInput("sigma0 must be finite".into()));
    }
    let asym = linalg::relative_asymmetry(sigma0);
    if asym > 1e-12 {
        return Err(EivError::InvalidInput(format!(
            "sigma0 is not symmetric (relative asymmetry {asym:e})"
        )));
    }
    if sigma0.clone().cholesky().is_none() {
        return Err(EivError::NotPositiveDefinite("sigma0".into()));
    }
    Ok(())
}

/// Returns `X Cₙ` without forming `Cₙ`.
pub fn center_columns(x: &DMatrix<f64>, kind: ModelKind) -> Result<DMatrix<f64>> {
    if !linalg::all_finite(x) {
        return Err(EivError::InvalidInput("matrix must be finite".into()));
    }
    Ok(center_unchecked(x, kind))
}

pub(crate) fn center_unchecked(x: &DMatrix<f64>, kind: ModelKind) -> DMatrix<f64> {
    match kind {
        ModelKind::NoIntercept => x.clone(),
        ModelKind::Intercept => {
            let means = linalg::row_means(x);
            let mut out = x.clone();
            for (mut row, mean) in out.row_iter_mut().zip(means.iter()) {
                row.add_scalar_mut(-mean);
            }
            out
        }
    }
}

/// Scatter `W = (X Cₙ)(X Cₙ)'` of an already stacked matrix.
pub fn scatter_of_stacked(x: &DMatrix<f64>, kind: ModelKind) -> Result<DMatrix<f64>> {
    let centered = center_columns(x, kind)?;
    let w = &centered * centered.transpose();
    Ok(linalg::symmetrize(&w))
}

/// Scatter matrix `W = X Cₙ X'` of the observations.
pub fn scatter_matrix(data: &ObservedData, kind: ModelKind) -> Result<DMatrix<f64>> {
    scatter_of_stacked(&data.stacked(), kind)
}

/// Eigendecomposition `W = G D G'` with descending eigenvalues and `G`
/// partitioned after its `p`-th row and column.
#[derive(Debug, Clone)]
pub struct EigenStructure {
    pub w: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub g: DMatrix<f64>,
    pub g11: DMatrix<f64>,
    pub g21: DMatrix<f64>,
    pub g12: DMatrix<f64>,
    pub g22: DMatrix<f64>,
    /// `λ_p − λ_{p+1}`.
    pub eigengap: f64,
    pub g11_condition: f64,
    /// Set when the signal subspace is not uniquely determined by `W`.
    pub degenerate: bool,
    pub p: usize,
}

impl EigenStructure {
    /// Assembles the structure from an already sorted decomposition.
    ///
    /// Fails with [`EivError::Unidentifiable`] when `G₁₁` is numerically
    /// singular.
    pub fn from_parts(
        w: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        g: DMatrix<f64>,
        p: usize,
    ) -> Result<Self> {
        let m = w.nrows();
        if p == 0 || p >= m || g.shape() != (m, m) || eigenvalues.len() != m {
            return Err(EivError::DimensionMismatch(format!(
                "eigenstructure of size {m} cannot be split at p = {p}"
            )));
        }
        let r = m - p;
        let g11 = g.view((0, 0), (p, p)).into_owned();
        let g12 = g.view((0, p), (p, r)).into_owned();
        let g21 = g.view((p, 0), (r, p)).into_owned();
        let g22 = g.view((p, p), (r, r)).into_owned();

        let eigengap = (eigenvalues[p - 1] - eigenvalues[p]).max(0.0);
        let degenerate = eigengap <= DEGENERATE_GAP_REL * eigenvalues[0].max(1.0);
        let g11_condition = linalg::condition_number(&g11);
        if g11_condition.is_nan() || g11_condition > MAX_G11_CONDITION {
            return Err(EivError::Unidentifiable(format!(
                "G11 condition number {g11_condition:e} exceeds {MAX_G11_CONDITION:e}"
            )));
        }

        Ok(Self {
            w,
            eigenvalues,
            g,
            g11,
            g21,
            g12,
            g22,
            eigengap,
            g11_condition,
            degenerate,
            p,
        })
    }

    pub fn r(&self) -> usize {
        self.g.nrows() - self.p
    }

    /// The first `p` columns of `G`.
    pub fn signal_basis(&self) -> DMatrix<f64> {
        self.g.columns(0, self.p).into_owned()
    }
}

/// Ordered eigendecomposition of a symmetric `w`, split at `p`.
pub fn signal_eigenstructure(w: &DMatrix<f64>, p: usize) -> Result<EigenStructure> {
    if !w.is_square() {
        return Err(EivError::DimensionMismatch("W must be square".into()));
    }
    if p == 0 || p >= w.nrows() {
        return Err(EivError::DimensionMismatch(format!(
            "need 1 <= p < {}, got p = {p}",
            w.nrows()
        )));
    }
    if !linalg::all_finite(w) {
        return Err(EivError::InvalidInput("W must be finite".into()));
    }
    let asym = linalg::relative_asymmetry(w);
    if asym > SYMMETRY_TOL {
        return Err(EivError::InvalidInput(format!(
            "W is not symmetric (relative asymmetry {asym:e})"
        )));
    }

    let eig = SymmetricEigen::new(w.clone());
    let m = w.nrows();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues = DVector::from_iterator(m, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut g = DMatrix::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        g.set_column(dst, &eig.eigenvectors.column(src));
    }
    EigenStructure::from_parts(w.clone(), eigenvalues, g, p)
}
