//! CSV ingestion and the fit report format.
//!
//! Dataset files have one observation per row and a header row. The first
//! `p` columns are the predictor components and the next `r` the response
//! components. When `p` and `r` are not given, they are read off the header
//! names: `x1_*` columns followed by `x2_*` columns.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EivError, Result};
use crate::estimators::FitResult;
use crate::linalg;
use crate::model::{ModelKind, ObservedData};
use crate::oracle::OracleReport;

pub const SCHEMA_VERSION: u32 = 1;

pub const LEGACY_NOTE: &str =
    "legacy closed form without the row-mean term; incorrect for the intercept model";
pub const SCALE_NOTE: &str = "diagnostic only: |R|_F^2 / (n (p + r)), not an estimator of sigma^2";

/// Reads `p` and `r` from an `x1_*`, `x2_*` header, if it follows that convention.
pub fn infer_dims(header: &[&str]) -> Option<(usize, usize)> {
    let p = header.iter().take_while(|h| h.starts_with("x1_")).count();
    let r = header[p..].iter().take_while(|h| h.starts_with("x2_")).count();
    (p > 0 && r > 0 && p + r == header.len()).then_some((p, r))
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    let value: f64 = cell.trim().parse().map_err(|_| EivError::Parse {
        row,
        column: column.to_string(),
        message: format!("\"{cell}\" is not a number"),
    })?;
    if !value.is_finite() {
        return Err(EivError::Parse {
            row,
            column: column.to_string(),
            message: format!("\"{cell}\" is not finite"),
        });
    }
    Ok(value)
}

/// Parses a dataset from any reader. Rows in errors are 1-based file lines,
/// so the first data row is row 2.
pub fn read_dataset_from<R: Read>(reader: R, dims: Option<(usize, usize)>) -> Result<ObservedData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let (p, r) = match dims {
        Some(d) => d,
        None => {
            let names: Vec<&str> = header.iter().map(String::as_str).collect();
            infer_dims(&names).ok_or_else(|| {
                EivError::InvalidInput(
                    "p and r not given and header does not follow the x1_*/x2_* convention".into(),
                )
            })?
        }
    };
    if p == 0 || r == 0 {
        return Err(EivError::InvalidInput("p and r must be at least 1".into()));
    }
    if header.len() != p + r {
        return Err(EivError::DimensionMismatch(format!(
            "header has {} columns, expected p + r = {}",
            header.len(),
            p + r
        )));
    }

    let mut columns: Vec<f64> = Vec::new();
    let mut n = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|pos| pos.line() as usize).unwrap_or(n + 2);
        if record.len() != p + r {
            return Err(EivError::DimensionMismatch(format!(
                "row {line} has {} columns, expected {}",
                record.len(),
                p + r
            )));
        }
        for (cell, name) in record.iter().zip(&header) {
            columns.push(parse_cell(cell, line, name)?);
        }
        n += 1;
    }
    if n < 2 {
        return Err(EivError::InvalidInput(format!("need at least 2 data rows, got {n}")));
    }
    // Row-major (observation-major) file → (p + r) × n with one column per row.
    let x = DMatrix::from_column_slice(p + r, n, &columns);
    ObservedData::from_stacked(&x, p)
}

pub fn read_dataset(path: &Path, p: usize, r: usize) -> Result<ObservedData> {
    read_dataset_from(fs::File::open(path)?, Some((p, r)))
}

/// Reads a dataset, taking `p` and `r` from the header.
pub fn read_dataset_inferred(path: &Path) -> Result<ObservedData> {
    read_dataset_from(fs::File::open(path)?, None)
}

/// Writes a dataset with an `x1_*`, `x2_*` header using shortest round-trip decimals.
pub fn write_dataset<W: Write>(writer: W, data: &ObservedData) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = (1..=data.p())
        .map(|j| format!("x1_{j}"))
        .chain((1..=data.r()).map(|j| format!("x2_{j}")))
        .collect();
    wtr.write_record(&header)?;
    let x = data.stacked();
    for col in x.column_iter() {
        wtr.write_record(col.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a plain numeric square matrix. A leading non-numeric row is
/// treated as a header and skipped.
pub fn read_matrix_from<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = idx + 1;
        let parsed: Vec<Result<f64>> = record
            .iter()
            .enumerate()
            .map(|(j, cell)| parse_cell(cell, line, &(j + 1).to_string()))
            .collect();
        if idx == 0 && parsed.iter().all(|v| v.is_err()) {
            continue;
        }
        rows.push(parsed.into_iter().collect::<Result<Vec<f64>>>()?);
    }
    let k = rows.len();
    if k == 0 || rows.iter().any(|row| row.len() != k) {
        return Err(EivError::DimensionMismatch("matrix file must hold a non-empty square matrix".into()));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

/// Reads `Σ₀`, symmetrizing it; fails if its relative asymmetry exceeds 1e-8.
pub fn read_sigma0(path: &Path, dim: usize) -> Result<DMatrix<f64>> {
    let m = read_matrix_from(fs::File::open(path)?)?;
    symmetrized_sigma0(m, dim)
}

pub fn symmetrized_sigma0(m: DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    if m.nrows() != dim {
        return Err(EivError::DimensionMismatch(format!(
            "sigma0 has {} rows, expected p + r = {dim}",
            m.nrows()
        )));
    }
    let asym = linalg::relative_asymmetry(&m);
    if asym > 1e-8 {
        return Err(EivError::InvalidInput(format!(
            "sigma0 relative asymmetry {asym:e} exceeds 1e-8"
        )));
    }
    Ok(linalg::symmetrize(&m))
}

/// `sha256:<hex>` of the given bytes.
pub fn checksum(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegacyMeans {
    pub note: String,
    pub values: MatrixJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDiagnostic {
    pub value: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsJson {
    pub eigengap: f64,
    pub g11_condition: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub input_checksum: String,
    pub model_kind: ModelKind,
    /// `"identity"` or `"sigma0"`.
    pub covariance: String,
    pub p: usize,
    pub r: usize,
    pub n: usize,
    pub b_hat: MatrixJson,
    pub alpha_hat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u1_hat: Option<MatrixJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u2_hat: Option<MatrixJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub legacy_u1_hat: Option<LegacyMeans>,
    pub olse_objective: f64,
    pub glse_objective: f64,
    pub residual_scale: ScaleDiagnostic,
    pub diagnostics: DiagnosticsJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReportOptions {
    pub emit_means: bool,
    pub legacy_means: bool,
}

impl FitReport {
    pub fn new(
        data: &ObservedData,
        fit: &FitResult,
        input_checksum: String,
        opts: ReportOptions,
        oracle: Option<OracleReport>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            input_checksum,
            model_kind: fit.kind,
            covariance: if fit.sigma0.is_some() { "sigma0" } else { "identity" }.to_string(),
            p: data.p(),
            r: data.r(),
            n: data.n(),
            b_hat: (&fit.b_hat).into(),
            alpha_hat: fit.alpha_hat.iter().copied().collect(),
            u1_hat: opts.emit_means.then(|| (&fit.u1_hat).into()),
            u2_hat: opts.emit_means.then(|| (&fit.u2_hat).into()),
            legacy_u1_hat: opts.legacy_means.then(|| LegacyMeans {
                note: LEGACY_NOTE.to_string(),
                values: (&fit.legacy_u1_hat).into(),
            }),
            olse_objective: fit.olse_objective,
            glse_objective: fit.glse_objective,
            residual_scale: ScaleDiagnostic {
                value: fit.residual_scale,
                note: SCALE_NOTE.to_string(),
            },
            diagnostics: DiagnosticsJson {
                eigengap: fit.diagnostics.eigengap,
                g11_condition: fit.diagnostics.g11_condition,
                degenerate: fit.diagnostics.degenerate,
            },
            oracle,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Long-format CSV: `field,row,col,value`, one line per scalar entry.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["field", "row", "col", "value"])?;
        fn scalar(wtr: &mut csv::Writer<Vec<u8>>, field: &str, value: String) -> csv::Result<()> {
            wtr.write_record([field, "0", "0", value.as_str()])
        }
        fn matrix(wtr: &mut csv::Writer<Vec<u8>>, field: &str, m: &MatrixJson) -> csv::Result<()> {
            for i in 0..m.rows {
                for j in 0..m.cols {
                    let value = m.data[i * m.cols + j].to_string();
                    wtr.write_record([field, &i.to_string(), &j.to_string(), &value])?;
                }
            }
            Ok(())
        }

        scalar(&mut wtr, "schema_version", self.schema_version.to_string())?;
        scalar(&mut wtr, "tool_version", self.tool_version.clone())?;
        scalar(&mut wtr, "input_checksum", self.input_checksum.clone())?;
        scalar(&mut wtr, "model_kind", self.model_kind.as_str().to_string())?;
        scalar(&mut wtr, "covariance", self.covariance.clone())?;
        scalar(&mut wtr, "p", self.p.to_string())?;
        scalar(&mut wtr, "r", self.r.to_string())?;
        scalar(&mut wtr, "n", self.n.to_string())?;
        matrix(&mut wtr, "b_hat", &self.b_hat)?;
        for (i, a) in self.alpha_hat.iter().enumerate() {
            wtr.write_record(["alpha_hat".to_string(), i.to_string(), "0".into(), a.to_string()])?;
        }
        if let Some(m) = &self.u1_hat {
            matrix(&mut wtr, "u1_hat", m)?;
        }
        if let Some(m) = &self.u2_hat {
            matrix(&mut wtr, "u2_hat", m)?;
        }
        if let Some(l) = &self.legacy_u1_hat {
            matrix(&mut wtr, "legacy_u1_hat", &l.values)?;
        }
        scalar(&mut wtr, "olse_objective", self.olse_objective.to_string())?;
        scalar(&mut wtr, "glse_objective", self.glse_objective.to_string())?;
        scalar(&mut wtr, "residual_scale_diagnostic", self.residual_scale.value.to_string())?;
        scalar(&mut wtr, "eigengap", self.diagnostics.eigengap.to_string())?;
        scalar(&mut wtr, "g11_condition", self.diagnostics.g11_condition.to_string())?;
        scalar(&mut wtr, "degenerate", self.diagnostics.degenerate.to_string())?;
        if let Some(o) = &self.oracle {
            scalar(&mut wtr, "oracle_max_abs_deviation", o.max_abs_deviation.to_string())?;
            scalar(&mut wtr, "oracle_gradient_max_abs", o.gradient_max_abs.to_string())?;
            scalar(&mut wtr, "oracle_perturbation_violations", o.perturbation_violations.to_string())?;
            scalar(&mut wtr, "oracle_legacy_objective_excess", o.legacy_objective_excess.to_string())?;
            scalar(&mut wtr, "oracle_passed", o.passed.to_string())?;
        }
        let bytes = wtr.into_inner().map_err(|e| EivError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
