//! Command-line entry point.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use sparsefactor_core::path::{prepare_path, PathGrid, PathOptions};
use sparsefactor_core::simulation::{StudyConfig, TrueModel};
use sparsefactor_core::{
    fit, log_likelihood, ml_fit, posterior_scores, rotate, Criterion, FactorModel, PenaltyFamily,
    PenaltySpec, RotationCriterion, SampleMoments,
};

use crate::error::{CliError, CliResult};
use crate::format::{
    self, fit_cell, matrix_rows, CellReportDoc, MetaDoc, Num, OptionsDoc, PathDoc, RotationDoc,
    StudyDoc, TimingsDoc, VERSION,
};
use crate::io::{load_moments, read_matrix};
use crate::study::{resolve_threads, run_study_parallel};

#[derive(Debug, Parser)]
#[command(name = "sparsefactor", version, about = "Sparse factor analysis by penalized likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one penalized model at a given rho.
    Fit(FitArgs),
    /// Trace the solution path over the (gamma, rho) grid.
    Path(PathArgs),
    /// Pick the best cell of a path document by an information criterion.
    Select(SelectArgs),
    /// Maximum likelihood fit followed by an orthogonal rotation.
    Rotate(RotateArgs),
    /// Monte Carlo study on a built-in true model.
    Simulate(SimulateArgs),
    /// Posterior-mean factor scores of observations under a fitted model.
    Scores(ScoresArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Lasso,
    Scad,
    Mcp,
    /// MC+ at the edge of hard thresholding.
    Hard,
}

/// Concavity used for `--penalty hard`.
const HARD_GAMMA: f64 = 1.01;

impl From<Family> for PenaltyFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Lasso => PenaltyFamily::Lasso,
            Family::Scad => PenaltyFamily::Scad,
            Family::Mcp | Family::Hard => PenaltyFamily::Mcp,
        }
    }
}

/// Explicit concavities for `family`, with `hard` pinned to its own value.
fn gamma_list(family: Family, given: &[f64]) -> CliResult<Vec<f64>> {
    match family {
        Family::Hard if !given.is_empty() => {
            Err(CliError::Usage("--gamma cannot be combined with --penalty hard".into()))
        }
        Family::Hard => Ok(vec![HARD_GAMMA]),
        Family::Lasso if !given.is_empty() => {
            Err(CliError::Usage("--gamma does not apply to the lasso".into()))
        }
        _ => Ok(given.to_vec()),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CriterionArg {
    Aic,
    Bic,
    Caic,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Aic => Criterion::Aic,
            CriterionArg::Bic => Criterion::Bic,
            CriterionArg::Caic => Criterion::Caic,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RotationArg {
    Varimax,
    L1,
}

impl From<RotationArg> for RotationCriterion {
    fn from(r: RotationArg) -> Self {
        match r {
            RotationArg::Varimax => RotationCriterion::Varimax,
            RotationArg::L1 => RotationCriterion::L1,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    A,
    B,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV data matrix, rows are observations (header optional).
    #[arg(long)]
    input: Option<PathBuf>,
    /// CSV covariance matrix instead of raw data; needs --n.
    #[arg(long)]
    cov: Option<PathBuf>,
    /// Sample size behind --cov.
    #[arg(long)]
    n: Option<usize>,
    /// Work with the correlation matrix.
    #[arg(long)]
    standardize: bool,
}

impl DataArgs {
    fn moments(&self) -> CliResult<SampleMoments> {
        load_moments(self.input.as_deref(), self.cov.as_deref(), self.n, self.standardize)
    }
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Weight of the guard against improper solutions.
    #[arg(long, default_value_t = 0.001)]
    eta: f64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short = 'm')]
    factors: usize,
    #[arg(long, value_enum, default_value_t = Family::Mcp)]
    penalty: Family,
    /// Concavity; defaults to 1.96 for mcp and 3.7 for scad.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PathArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short = 'm')]
    factors: usize,
    #[arg(long, value_enum, default_value_t = Family::Mcp)]
    penalty: Family,
    /// Concavities of the nonconvex rows (comma separated). Without it a
    /// log-spaced grid of --gamma-count rows is used.
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    /// Number of gamma rows including the lasso row.
    #[arg(long, default_value_t = 10)]
    gamma_count: usize,
    /// Number of rho values.
    #[arg(long, default_value_t = 30)]
    rho_count: usize,
    /// Ratio of the smallest to the largest rho.
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    /// Random restarts when a fit loses factors.
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the long-format loading table (gamma, rho, i, j, lambda).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Path document written by `path`.
    #[arg(long)]
    path: PathBuf,
    #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
    criterion: CriterionArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RotateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short = 'm')]
    factors: usize,
    #[arg(long, value_enum, default_value_t = RotationArg::Varimax)]
    rotation: RotationArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Observations per replication.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, value_enum, default_value_t = Family::Mcp)]
    penalty: Family,
    #[arg(long, value_delimiter = ',', default_value = "1.96")]
    gamma: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    rho_count: usize,
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core); falls back to SPARSEFACTOR_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the metric table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoresArgs {
    /// CSV data matrix whose rows are scored.
    #[arg(long)]
    input: PathBuf,
    /// Document written by `fit`, `select` or `path`.
    #[arg(long)]
    model: PathBuf,
    /// CSV of scores, one line per observation.
    #[arg(long)]
    out: PathBuf,
    /// Also write the reconstructions Λ·scores plus the column means.
    #[arg(long)]
    reconstruct: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sparsefactor: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Fit(a) => run_fit(a),
        Command::Path(a) => run_path(a),
        Command::Select(a) => run_select(a),
        Command::Rotate(a) => run_rotate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Scores(a) => run_scores(a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn check_factors(m: usize, moments: &SampleMoments) -> CliResult<()> {
    if m == 0 || m > moments.n_vars() {
        return Err(CliError::Usage(format!(
            "--factors must be between 1 and {}",
            moments.n_vars()
        )));
    }
    Ok(())
}

fn penalty_spec(family: PenaltyFamily, gamma: Option<f64>) -> CliResult<PenaltySpec> {
    let spec = match family {
        PenaltyFamily::Lasso => PenaltySpec::lasso(),
        PenaltyFamily::Scad => PenaltySpec::scad(gamma.unwrap_or(3.7))?,
        PenaltyFamily::Mcp => PenaltySpec::mcp(gamma.unwrap_or(1.96))?,
    };
    Ok(spec)
}

fn path_options(eta: f64) -> PathOptions {
    let mut o = PathOptions::default();
    o.solver.eta = eta;
    o
}

fn run_fit(a: FitArgs) -> CliResult<()> {
    let start = Instant::now();
    let moments = a.data.moments()?;
    check_factors(a.factors, &moments)?;
    let family = PenaltyFamily::from(a.penalty);
    let gamma = gamma_list(a.penalty, a.gamma.as_slice())?.first().copied();
    let spec = penalty_spec(family, gamma)?;
    if !(a.rho >= 0.0) {
        return Err(CliError::Usage("--rho must be nonnegative".into()));
    }
    let options = path_options(a.solver.eta);
    let init = sparsefactor_core::init_loadings(&moments, a.factors, &options.solver)?;
    let result = fit(&moments, a.rho, &spec, &init.model, &options.solver)?;
    let mut warnings: Vec<String> = init.warnings.iter().map(|w| format!("{w:?}")).collect();
    warnings.extend(result.warnings.iter().map(|w| format!("{w:?}")));
    let gamma = if spec.is_lasso() { f64::INFINITY } else { spec.gamma() };
    let doc = CellReportDoc {
        best: None,
        cell: fit_cell(&result, gamma, moments.n_obs()),
        meta: Some(meta(&moments, a.factors, family, 0, &options, a.data.standardize, warnings, start)),
    };
    write_json(&a.out, &doc)
}

#[allow(clippy::too_many_arguments)]
fn meta(
    moments: &SampleMoments,
    m: usize,
    family: PenaltyFamily,
    seed: u64,
    options: &PathOptions,
    standardized: bool,
    warnings: Vec<String>,
    start: Instant,
) -> MetaDoc {
    MetaDoc {
        seed,
        family: family.name().into(),
        n_factors: m,
        n_vars: moments.n_vars(),
        n_obs: moments.n_obs(),
        standardized,
        options: OptionsDoc::from(options),
        version: VERSION.into(),
        warnings,
        timings: TimingsDoc {
            total_seconds: start.elapsed().as_secs_f64(),
        },
    }
}

fn run_path(a: PathArgs) -> CliResult<()> {
    let start = Instant::now();
    let moments = a.data.moments()?;
    check_factors(a.factors, &moments)?;
    let family = PenaltyFamily::from(a.penalty);
    let explicit = gamma_list(a.penalty, &a.gamma)?;
    let mut options = path_options(a.solver.eta);
    options.n_rho = a.rho_count;
    options.delta = a.delta;
    options.n_gamma = a.gamma_count;
    options.restarts = a.restarts;

    let (init, grid) = prepare_path(&moments, a.factors, family, &options)?;
    let grid = if explicit.is_empty() {
        grid
    } else {
        let mut gammas: Vec<f64> = explicit.iter().copied().filter(|g| g.is_finite()).collect();
        gammas.sort_by(|x, y| y.total_cmp(x));
        gammas.dedup();
        gammas.insert(0, f64::INFINITY);
        PathGrid::new(grid.rhos().to_vec(), gammas)?
    };
    let path = sparsefactor_core::path::fit_path_from(&moments, &init, grid, family, &options, a.seed)?;

    let mut warnings: Vec<String> = path.init_warnings.iter().map(|w| format!("{w:?}")).collect();
    let unconverged = path.cells.iter().flatten().filter(|c| !c.fit.converged).count();
    if unconverged > 0 {
        warnings.push(format!("{unconverged} cells did not converge"));
    }
    for w in &warnings {
        eprintln!("sparsefactor: warning: {w}");
    }
    let doc = PathDoc::new(
        &path,
        meta(&moments, a.factors, family, a.seed, &options, a.data.standardize, warnings, start),
        Some(a.criterion.into()),
    );
    write_json(&a.out, &doc)?;
    if let Some(csv_path) = &a.csv {
        format::write_long_csv(&path, create(csv_path)?)?;
    }
    Ok(())
}

fn run_select(a: SelectArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.path)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.path.display())))?;
    let doc: PathDoc = serde_json::from_str(&text)?;
    let best = doc
        .select(a.criterion.into())
        .ok_or_else(|| CliError::Data("path document has no cells".into()))?;
    let out = CellReportDoc {
        cell: doc.cells[best.index].clone(),
        best: Some(best),
        meta: Some(doc.meta),
    };
    write_json(&a.out, &out)
}

fn run_rotate(a: RotateArgs) -> CliResult<()> {
    let moments = a.data.moments()?;
    check_factors(a.factors, &moments)?;
    let options = path_options(a.solver.eta).solver;
    let ml = ml_fit(&moments, a.factors, &options)?;
    let criterion = RotationCriterion::from(a.rotation);
    let r = rotate(ml.model.loadings(), criterion, a.seed);
    let rotated = FactorModel::new(r.loadings.clone(), ml.model.psi().clone())?;
    let doc = RotationDoc {
        criterion: criterion.name().into(),
        criterion_value: Num(r.criterion_value),
        iterations: r.iterations,
        loglik: Num(log_likelihood(&rotated, &moments)?),
        lambda: matrix_rows(&r.loadings),
        rotation: matrix_rows(&r.rotation),
        psi: ml.model.psi().iter().map(|&v| Num(v)).collect(),
        seed: a.seed,
        version: VERSION.into(),
    };
    write_json(&a.out, &doc)
}

fn run_simulate(a: SimulateArgs) -> CliResult<()> {
    let threads = resolve_threads(a.threads)?;
    let model = match a.model {
        ModelArg::A => TrueModel::A,
        ModelArg::B => TrueModel::B,
    };
    let mut config = StudyConfig::new(model, a.n, a.reps, a.seed);
    config.family = a.penalty.into();
    if config.family == PenaltyFamily::Lasso {
        config.gammas.clear();
    } else {
        let gammas = match a.penalty {
            Family::Hard => vec![HARD_GAMMA],
            _ => a.gamma.clone(),
        };
        for &g in &gammas {
            PenaltySpec::new(config.family, g)?;
        }
        config.gammas = gammas;
    }
    config.path = path_options(a.solver.eta);
    config.path.n_rho = a.rho_count;
    config.path.delta = a.delta;
    config.path.restarts = a.restarts;
    let report = run_study_parallel(&config, threads)?;
    for (rep, err) in &report.failures {
        eprintln!("sparsefactor: replication {rep} failed: {err}");
    }
    let doc = StudyDoc::new(&config, &report);
    write_json(&a.out, &doc)?;
    if let Some(csv_path) = &a.csv {
        format::write_study_csv(&doc, create(csv_path)?)?;
    }
    Ok(())
}

fn run_scores(a: ScoresArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.model)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let model = format::model_from_json(&text)?;
    let data = read_matrix(&a.input)?;
    if data.ncols() != model.n_vars() {
        return Err(CliError::Data(format!(
            "data have {} columns, model has {} variables",
            data.ncols(),
            model.n_vars()
        )));
    }
    let means = DVector::from_fn(data.ncols(), |j, _| data.column(j).mean());
    let m = model.n_factors();
    let mut scores = csv::Writer::from_writer(create(&a.out)?);
    scores.write_record((1..=m).map(|j| format!("f{j}")))?;
    let mut recon = match &a.reconstruct {
        Some(p) => {
            let mut w = csv::Writer::from_writer(create(p)?);
            w.write_record((1..=model.n_vars()).map(|j| format!("x{j}")))?;
            Some(w)
        }
        None => None,
    };
    for r in 0..data.nrows() {
        let x = data.row(r).transpose() - &means;
        let f = posterior_scores(&model, &x)?;
        scores.write_record(f.iter().map(|v| format!("{v}")))?;
        if let Some(w) = recon.as_mut() {
            let xhat = model.loadings() * &f + &means;
            w.write_record(xhat.iter().map(|v| format!("{v}")))?;
        }
    }
    scores.flush()?;
    if let Some(mut w) = recon {
        w.flush()?;
    }
    Ok(())
}
