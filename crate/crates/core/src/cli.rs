//! Command-line surface: `fit`, `simulate` and `verify`.
//!
//! Exit codes: 0 success, 1 usage/validation/parse error, 2 unidentifiable
//! model or non-positive-definite `Σ₀`, 3 verification failed, 4 too many
//! skipped replicates in `simulate`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{EivError, Result};
use crate::estimators;
use crate::io::{self, FitReport, ReportOptions, SCHEMA_VERSION};
use crate::model::{ModelKind, ModelSpec};
use crate::oracle::{self, OracleConfig};
use crate::simulate::{self, ConsistencyReport, ErrorKind, TruthTemplate};
use crate::verify::{self, VerifyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "eivreg", version, about = "Errors-in-variables regression estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a dataset and print a report.
    Fit(FitArgs),
    /// Run a Monte Carlo consistency experiment.
    Simulate(SimulateArgs),
    /// Check the estimator identities on random instances.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("model").required(true).args(["intercept", "no_intercept"])))]
struct ModelFlags {
    #[arg(long)]
    intercept: bool,
    #[arg(long)]
    no_intercept: bool,
}

impl ModelFlags {
    fn kind(&self) -> ModelKind {
        if self.intercept {
            ModelKind::Intercept
        } else {
            ModelKind::NoIntercept
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Predictor dimension; read from `x1_*` header names when omitted.
    #[arg(long)]
    p: Option<usize>,
    /// Response dimension; read from `x2_*` header names when omitted.
    #[arg(long)]
    r: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    /// Square CSV matrix with the known error-covariance shape.
    #[arg(long)]
    sigma0: Option<PathBuf>,
    #[arg(long)]
    emit_means: bool,
    /// Include the legacy mean estimate (incorrect for the intercept model).
    #[arg(long)]
    legacy_means: bool,
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ErrorArg {
    Gaussian,
    Uniform,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = ErrorArg::Gaussian)]
    error: ErrorArg,
    #[arg(long, value_delimiter = ',', default_value = "50,500,2000")]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    /// CSV table path; a JSON summary is written next to it.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{rendered}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => run_fit(&a, out, err),
        Command::Simulate(a) => run_simulate(&a, out),
        Command::Verify(a) => run_verify(&a, out, estimators::fit),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn emit(text: &str, output: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_fit(a: &FitArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(EivError::InvalidInput("--tol must be positive".into()));
    }
    let dims = match (a.p, a.r) {
        (Some(p), Some(r)) => Some((p, r)),
        (None, None) => None,
        _ => return Err(EivError::InvalidInput("give both --p and --r, or neither".into())),
    };
    let bytes = fs::read(&a.input)?;
    let data = io::read_dataset_from(bytes.as_slice(), dims)?;
    let kind = a.model.kind();
    let spec = match &a.sigma0 {
        None => ModelSpec::new(kind),
        Some(path) => ModelSpec::with_sigma0(kind, io::read_sigma0(path, data.p() + data.r())?)?,
    };
    let fit = estimators::fit(&data, &spec)?;
    if fit.diagnostics.degenerate {
        let _ = writeln!(
            err,
            "warning: signal subspace is degenerate (eigengap {:e}); estimates are not unique",
            fit.diagnostics.eigengap
        );
    }

    let oracle_report = if a.verify {
        let cfg = OracleConfig {
            tol: a.tol,
            ..OracleConfig::default()
        };
        Some(oracle::certify(&data, &fit, &cfg)?)
    } else {
        None
    };
    let opts = ReportOptions {
        emit_means: a.emit_means,
        legacy_means: a.legacy_means,
    };
    let report = FitReport::new(&data, &fit, io::checksum(&bytes), opts, oracle_report);
    let text = match a.format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    emit(&text, a.output.as_deref(), out)?;

    match oracle_report {
        Some(o) if !o.passed => {
            let _ = writeln!(err, "verification failed: {o:?}");
            Ok(EXIT_VERIFY_FAILED)
        }
        _ => Ok(EXIT_OK),
    }
}

#[derive(Serialize)]
struct SimulationSummary<'a> {
    schema_version: u32,
    tool_version: &'a str,
    p: usize,
    r: usize,
    sigma: f64,
    error: ErrorKind,
    model_kind: ModelKind,
    report: &'a ConsistencyReport,
}

pub fn consistency_table(report: &ConsistencyReport) -> String {
    let mut s = String::from("n,b_error_median,u1_rmse_corrected,u1_rmse_legacy,skipped\n");
    for (k, n) in report.n_grid.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            n,
            report.b_error_median[k],
            report.u1_rmse_corrected[k],
            report.u1_rmse_legacy[k],
            report.skipped[k]
        ));
    }
    s
}

/// Path of the JSON summary written next to the CSV table.
pub fn summary_path(table: &Path) -> PathBuf {
    let candidate = table.with_extension("json");
    if candidate == table {
        table.with_extension("summary.json")
    } else {
        candidate
    }
}

fn run_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    if a.p == 0 || a.r == 0 {
        return Err(EivError::InvalidInput("--p and --r must be at least 1".into()));
    }
    if !a.sigma.is_finite() || a.sigma < 0.0 {
        return Err(EivError::InvalidInput("--sigma must be a finite non-negative number".into()));
    }
    let error_kind = match a.error {
        ErrorArg::Gaussian => ErrorKind::Gaussian,
        ErrorArg::Uniform => ErrorKind::UniformCentered,
    };
    let kind = a.model.kind();
    let template = TruthTemplate::standard(a.p, a.r, a.sigma, error_kind, kind);
    let report = simulate::consistency_experiment(&template, &a.n_grid, a.reps, a.seed)?;
    let table = consistency_table(&report);
    match &a.output {
        None => out.write_all(table.as_bytes())?,
        Some(path) => {
            fs::write(path, &table)?;
            let summary = SimulationSummary {
                schema_version: SCHEMA_VERSION,
                tool_version: env!("CARGO_PKG_VERSION"),
                p: a.p,
                r: a.r,
                sigma: a.sigma,
                error: error_kind,
                model_kind: kind,
                report: &report,
            };
            let mut json = serde_json::to_string_pretty(&summary)?;
            json.push('\n');
            fs::write(summary_path(path), json)?;
        }
    }
    Ok(EXIT_OK)
}

fn run_verify(a: &VerifyArgs, out: &mut dyn Write, fitter: verify::Fitter) -> Result<i32> {
    if a.instances == 0 {
        return Err(EivError::InvalidInput("--instances must be at least 1".into()));
    }
    let outcome = verify::run_with(&VerifyConfig::new(a.seed, a.instances), fitter)?;
    out.write_all(outcome.render_table().as_bytes())?;
    if outcome.passed() {
        return Ok(EXIT_OK);
    }
    if let Some(failure) = &outcome.first_failure {
        writeln!(out, "first failing instance:")?;
        writeln!(out, "{}", serde_json::to_string(failure)?)?;
    }
    Ok(EXIT_VERIFY_FAILED)
}
