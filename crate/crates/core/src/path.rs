//! Solution paths over the `(γ, ρ)` grid.
//!
//! The lasso row is traced first, from the largest `ρ` down, each fit warm
//! started from its neighbour. Every concave row is then warm started
//! cell by cell from the row above it at the same `ρ`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
// Only needed when std is absent from the dependency graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::leading_eigenpairs;
use crate::model::{FactorModel, SampleMoments};
use crate::penalty::{PenaltyFamily, PenaltySpec};
use crate::selection::{criteria, CriterionSet};
use crate::solver::{e_step, fit, FitResult, FitWarning, SolverOptions};

/// Number of trial scalings used when locating the largest useful `ρ`.
pub const RHO_MAX_TRIALS: usize = 10;

/// Upper end of the concavity grid.
pub const GAMMA_MAX: f64 = 100.0;

/// `ρ` values (descending) and `γ` values (descending, lasso first).
#[derive(Debug, Clone, PartialEq)]
pub struct PathGrid {
    rhos: Vec<f64>,
    gammas: Vec<f64>,
}

impl PathGrid {
    pub fn new(rhos: Vec<f64>, gammas: Vec<f64>) -> Result<Self> {
        if rhos.is_empty() || gammas.is_empty() {
            return Err(Error::InvalidParameter("path grid must be non-empty".into()));
        }
        if rhos.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidParameter("grid rho values must be positive".into()));
        }
        if rhos.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidParameter("grid rho values must strictly decrease".into()));
        }
        if gammas.iter().any(|g| !(*g > 1.0)) {
            return Err(Error::InvalidParameter("grid gamma values must exceed 1".into()));
        }
        if gammas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidParameter("grid gamma values must strictly decrease".into()));
        }
        Ok(Self { rhos, gammas })
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rhos
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }
}

/// Grid with `k` log-spaced `ρ` values from `rho_max` down to `delta·rho_max`
/// and `t` concavities: `∞` followed by `t − 1` log-spaced values from 100
/// down to the family minimum.
pub fn build_grid(
    rho_max: f64,
    k: usize,
    delta: f64,
    family: PenaltyFamily,
    t: usize,
) -> Result<PathGrid> {
    if k < 2 || !(delta > 0.0 && delta < 1.0) || t < 1 {
        return Err(Error::InvalidParameter(
            "grid needs K >= 2, 0 < delta < 1 and T >= 1".into(),
        ));
    }
    let ratio = delta.ln() / (k - 1) as f64;
    let mut rhos: Vec<f64> = (0..k).map(|i| rho_max * (ratio * i as f64).exp()).collect();
    rhos[k - 1] = rho_max * delta;
    let mut gammas = alloc::vec![f64::INFINITY];
    if family != PenaltyFamily::Lasso && t > 1 {
        gammas.extend(log_spaced(GAMMA_MAX, family.gamma_min(), t - 1));
    }
    PathGrid::new(rhos, gammas)
}

fn log_spaced(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return alloc::vec![hi];
    }
    let step = (lo / hi).ln() / (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| hi * (step * i as f64).exp()).collect();
    out[n - 1] = lo;
    out
}

/// Starting point for a path.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub model: FactorModel,
    pub warnings: Vec<FitWarning>,
}

/// One-factor maximum likelihood loadings in column 1, zeros elsewhere.
///
/// The one-factor fit starts from the leading eigenpair of `S`. If it fails
/// to converge, the eigen start itself is used.
pub fn init_loadings(
    moments: &SampleMoments,
    m: usize,
    options: &SolverOptions,
) -> Result<Initialization> {
    if m == 0 {
        return Err(Error::InvalidParameter("number of factors must be at least 1".into()));
    }
    moments.check_positive_variances()?;
    let p = moments.n_vars();
    let eigen = eigen_start(moments, 1, options.psi_floor);
    let mut warnings = Vec::new();
    let column = match fit(moments, 0.0, &PenaltySpec::lasso(), &eigen, options) {
        Ok(res) if res.converged => res.model.loadings().column(0).into_owned(),
        _ => {
            warnings.push(FitWarning::InitFallback);
            eigen.loadings().column(0).into_owned()
        }
    };
    let common: f64 = column.iter().map(|v| v * v).sum();
    let total: f64 = moments.variances().sum();
    let column = if common <= 1e-8 * total {
        warnings.push(FitWarning::NoCommonVariance);
        eigen.loadings().column(0).into_owned()
    } else {
        column
    };
    let mut loadings = DMatrix::zeros(p, m);
    loadings.set_column(0, &column);
    let psi = DVector::from_fn(p, |i, _| {
        (moments.var(i) - column[i] * column[i]).max(options.psi_floor)
    });
    Ok(Initialization {
        model: FactorModel::new(loadings, psi)?,
        warnings,
    })
}

/// Loadings `√max(e_j, 0)·v_j` from the leading `m` eigenpairs of `S`, with
/// `ψ_i = s_ii − Σ_j λ_ij²` kept at least 5% of `s_ii`.
pub fn eigen_start(moments: &SampleMoments, m: usize, psi_floor: f64) -> FactorModel {
    let p = moments.n_vars();
    let (values, vectors) = leading_eigenpairs(moments, m);
    let mut loadings = DMatrix::zeros(p, m);
    for (j, e) in values.iter().enumerate() {
        let scale = e.max(0.0).sqrt();
        for i in 0..p {
            loadings[(i, j)] = scale * vectors[(i, j)];
        }
    }
    let psi = DVector::from_fn(p, |i, _| {
        let s = moments.var(i);
        let common: f64 = loadings.row(i).iter().map(|v| v * v).sum();
        (s - common).max(0.05 * s).max(psi_floor)
    });
    FactorModel::new(loadings, psi).expect("finite eigen start")
}

/// Smallest `ρ` at which the lasso keeps every loading at zero, estimated
/// from trial models carrying one scaled loading.
pub fn select_rho_max(
    moments: &SampleMoments,
    init: &FactorModel,
    options: &SolverOptions,
) -> Result<f64> {
    let p = moments.n_vars();
    let m = init.n_factors();
    if p < 2 {
        return Err(Error::InvalidParameter("a path needs at least two variables".into()));
    }
    let column = init.loadings().column(0);
    let alpha = column.iamax();
    let lead = column[alpha];
    if lead == 0.0 {
        return Err(Error::InvalidParameter(
            "initial loadings have an all-zero first column".into(),
        ));
    }
    let mut rho_max = 0.0f64;
    for h in 1..=RHO_MAX_TRIALS {
        let xi = 0.1 * h as f64;
        let mut loadings = DMatrix::zeros(p, m);
        loadings[(alpha, 0)] = xi * lead;
        let start = FactorModel::new(loadings.clone(), moments.variances())?;
        let cache = e_step(&start, moments)?;
        // one closed-form Ψ update with Λ held fixed
        let psi = DVector::from_fn(p, |i, _| {
            let s = moments.var(i);
            let l = loadings[(i, 0)];
            let value = s - 2.0 * l * cache.b[(0, i)] + l * cache.a[(0, 0)] * l + options.eta * s;
            value.max(options.psi_floor)
        });
        let trial = FactorModel::new(loadings, psi)?;
        let cache = e_step(&trial, moments)?;
        for i in (0..p).filter(|&i| i != alpha) {
            rho_max = rho_max.max(cache.b[(0, i)].abs() / trial.psi()[i]);
        }
    }
    if !(rho_max > 0.0) {
        return Err(Error::InvalidData(
            "no covariance between variables; every penalty level gives zero loadings".into(),
        ));
    }
    Ok(rho_max)
}

/// Upper bound on neighbour sweeps per row.
const MAX_REFINE_PASSES: usize = 6;
/// Objective gain needed to replace a cell during refinement.
const REFINE_TOL: f64 = 1e-9;

/// Step used by [`verified_rho_max`].
pub const RHO_MAX_GROWTH: f64 = 1.1;

/// Raises `rho_max` until the lasso fit from `init` is exactly zero at it
/// and at `1.05·rho_max`.
///
/// The single-loading estimate of [`select_rho_max`] only guarantees that
/// zero is a local solution. A whole column started from a large one-factor
/// solution can still beat it just above that level.
pub fn verified_rho_max(
    moments: &SampleMoments,
    init: &FactorModel,
    rho_max: f64,
    options: &SolverOptions,
) -> Result<f64> {
    let spec = PenaltySpec::lasso();
    let mut rho = rho_max;
    for _ in 0..200 {
        let here = fit(moments, rho, &spec, init, options)?.df();
        if here == 0 && fit(moments, 1.05 * rho, &spec, init, options)?.df() == 0 {
            return Ok(rho);
        }
        rho *= RHO_MAX_GROWTH;
    }
    Err(Error::InvalidData(format!(
        "no penalty level up to {rho:e} zeroes the loadings"
    )))
}

/// Settings of the path driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOptions {
    /// Number of `ρ` values.
    pub n_rho: usize,
    /// `ρ_min / ρ_max`.
    pub delta: f64,
    /// Number of `γ` values including the lasso row.
    pub n_gamma: usize,
    /// Random restarts tried when a fit uses fewer than `m` factors.
    pub restarts: usize,
    /// Also start each concave-row cell from its neighbour at the previous
    /// `ρ` and keep the better of the two fits.
    pub row_warm_start: bool,
    /// After a row is traced, refit interior cells from their neighbours
    /// (smaller `ρ` first, then larger) and keep whichever fit is better.
    pub backward_sweep: bool,
    pub solver: SolverOptions,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            n_rho: 30,
            delta: 0.001,
            n_gamma: 10,
            restarts: 5,
            row_warm_start: true,
            backward_sweep: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathCell {
    pub fit: FitResult,
    pub df: usize,
    pub criteria: CriterionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    /// `cells[t][k]` is the fit at `gammas[t]`, `rhos[k]`.
    pub cells: Vec<Vec<PathCell>>,
    pub grid: PathGrid,
    pub family: PenaltyFamily,
    pub n_factors: usize,
    pub seed: u64,
    pub options: PathOptions,
    pub init_warnings: Vec<FitWarning>,
}

impl PathResult {
    pub fn cell(&self, t: usize, k: usize) -> &PathCell {
        &self.cells[t][k]
    }
}

/// Initialization, `ρ_max` and the default grid for `family`.
pub fn prepare_path(
    moments: &SampleMoments,
    m: usize,
    family: PenaltyFamily,
    options: &PathOptions,
) -> Result<(Initialization, PathGrid)> {
    let init = init_loadings(moments, m, &options.solver)?;
    let rho_max = select_rho_max(moments, &init.model, &options.solver)?;
    let rho_max = verified_rho_max(moments, &init.model, rho_max, &options.solver)?;
    let grid = build_grid(rho_max, options.n_rho, options.delta, family, options.n_gamma)?;
    Ok((init, grid))
}

/// Initializes, builds the default grid and traces the full path.
pub fn compute_path(
    moments: &SampleMoments,
    m: usize,
    family: PenaltyFamily,
    options: &PathOptions,
    seed: u64,
) -> Result<PathResult> {
    let (init, grid) = prepare_path(moments, m, family, options)?;
    fit_path_from(moments, &init, grid, family, options, seed)
}

/// Traces the path over `grid`, starting the first lasso cell from the
/// default initialization.
pub fn fit_path(
    moments: &SampleMoments,
    m: usize,
    grid: PathGrid,
    family: PenaltyFamily,
    options: &PathOptions,
    seed: u64,
) -> Result<PathResult> {
    let init = init_loadings(moments, m, &options.solver)?;
    fit_path_from(moments, &init, grid, family, options, seed)
}

/// Traces the path over `grid` from a given initialization.
pub fn fit_path_from(
    moments: &SampleMoments,
    init: &Initialization,
    grid: PathGrid,
    family: PenaltyFamily,
    options: &PathOptions,
    seed: u64,
) -> Result<PathResult> {
    let m = init.model.n_factors();
    let n_rho = grid.rhos().len();
    let specs: Vec<PenaltySpec> = grid
        .gammas()
        .iter()
        .map(|&g| PenaltySpec::new(family, g))
        .collect::<Result<_>>()?;
    let mut cells: Vec<Vec<PathCell>> = Vec::with_capacity(specs.len());
    for (t, spec) in specs.iter().enumerate() {
        let mut row: Vec<PathCell> = Vec::with_capacity(n_rho);
        for (k, &rho) in grid.rhos().iter().enumerate() {
            let mut starts: Vec<&FactorModel> = Vec::with_capacity(2);
            if t > 0 {
                starts.push(&cells[t - 1][k].fit.model);
            }
            if k > 0 && (t == 0 || options.row_warm_start) {
                starts.push(&row[k - 1].fit.model);
            }
            if starts.is_empty() {
                starts.push(&init.model);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((t * n_rho + k) as u64);
            let cell = fit_cell(moments, &starts, m, rho, spec, options, &mut rng).map_err(|e| {
                Error::PathCell {
                    gamma_index: t,
                    rho_index: k,
                    source: alloc::boxed::Box::new(e),
                }
            })?;
            row.push(cell);
        }
        if options.backward_sweep {
            refine_row(moments, &grid, spec, options, t, &mut row)?;
        }
        cells.push(row);
    }
    Ok(PathResult {
        cells,
        grid,
        family,
        n_factors: m,
        seed,
        options: *options,
        init_warnings: init.warnings.clone(),
    })
}

fn fit_cell(
    moments: &SampleMoments,
    starts: &[&FactorModel],
    m: usize,
    rho: f64,
    spec: &PenaltySpec,
    options: &PathOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PathCell> {
    let mut current: Option<FitResult> = None;
    for start in starts {
        let res = fit(moments, rho, spec, start, &options.solver)?;
        if current
            .as_ref()
            .map_or(true, |c| res.objective.total > c.objective.total)
        {
            current = Some(res);
        }
    }
    let current = current.expect("at least one start");
    let best = maybe_expand_factors(current, moments, m, spec, options, rng);
    Ok(finish_cell(moments, best))
}

/// Alternating neighbour sweeps over the interior of a traced row: each
/// cell is refit from the adjacent cell and the fit with the higher
/// objective is kept. The `ρ_K` cell is left alone.
fn refine_row(
    moments: &SampleMoments,
    grid: &PathGrid,
    spec: &PenaltySpec,
    options: &PathOptions,
    t: usize,
    row: &mut [PathCell],
) -> Result<()> {
    let n_rho = row.len();
    if n_rho < 3 {
        return Ok(());
    }
    for pass in 0..MAX_REFINE_PASSES {
        let mut changed = false;
        let backward = pass % 2 == 0;
        let order: Vec<usize> = if backward {
            (1..n_rho - 1).rev().collect()
        } else {
            (2..n_rho).collect()
        };
        for k in order {
            let from = if backward { k + 1 } else { k - 1 };
            let res = fit(moments, grid.rhos()[k], spec, &row[from].fit.model, &options.solver)
                .map_err(|e| Error::PathCell {
                    gamma_index: t,
                    rho_index: k,
                    source: alloc::boxed::Box::new(e),
                })?;
            if res.objective.total > row[k].fit.objective.total + REFINE_TOL {
                row[k] = finish_cell(moments, res);
                changed = true;
            }
        }
        if !changed && pass > 0 {
            break;
        }
    }
    Ok(())
}

fn finish_cell(moments: &SampleMoments, fit: FitResult) -> PathCell {
    let df = fit.df();
    PathCell {
        criteria: criteria(fit.objective.loglik, df, moments.n_obs(), moments.n_vars()),
        df,
        fit,
    }
}

/// When fewer than `m` columns are active, refits from random starts in
/// which every zero column is redrawn from `U[−0.5, 0.5]`, and keeps the
/// fit with the largest penalized objective.
pub fn maybe_expand_factors(
    current: FitResult,
    moments: &SampleMoments,
    m: usize,
    spec: &PenaltySpec,
    options: &PathOptions,
    rng: &mut impl Rng,
) -> FitResult {
    let active = current.model.active_factors();
    if active >= m || options.restarts == 0 {
        return current;
    }
    let mut best = current;
    let mut failed = false;
    let base = best.model.clone();
    for _ in 0..options.restarts {
        let mut loadings = base.loadings().clone();
        for j in 0..loadings.ncols() {
            if loadings.column(j).iter().all(|&v| v == 0.0) {
                for i in 0..loadings.nrows() {
                    loadings[(i, j)] = rng.random_range(-0.5..=0.5);
                }
            }
        }
        let start = match FactorModel::new(loadings, base.psi().clone()) {
            Ok(s) => s,
            Err(_) => {
                failed = true;
                continue;
            }
        };
        match fit(moments, best.rho, spec, &start, &options.solver) {
            Ok(res) if res.objective.total > best.objective.total => best = res,
            Ok(_) => {}
            Err(_) => failed = true,
        }
    }
    if failed && !best.warnings.contains(&FitWarning::RestartFailed) {
        best.warnings.push(FitWarning::RestartFailed);
    }
    best
}

/// Readable label for a `γ` value.
pub fn gamma_label(gamma: f64) -> alloc::string::String {
    if gamma.is_infinite() {
        "inf".into()
    } else {
        format!("{gamma}")
    }
}
