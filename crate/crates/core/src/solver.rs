//! Penalized EM for a fixed `(ρ, γ)`.
//!
//! The E-step reduces the data to the posterior moments `(M, B, A)`. The
//! M-step runs cyclic coordinate descent over each row of `Λ` against the
//! expected complete-data objective and then updates `Ψ` in closed form,
//! including the `η` trace penalty.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{eta_term, penalty_term, Capacitance, FactorModel, PenalizedObjectiveValue, SampleMoments};
use crate::penalty::PenaltySpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Weight of the `tr(Ψ^{-1/2} S Ψ^{-1/2})` penalty against improper solutions.
    pub eta: f64,
    /// Relative change of the penalized objective that ends the EM loop.
    pub em_tol: f64,
    pub em_max_iter: usize,
    /// Largest coordinate change that ends a row's descent sweeps.
    pub cd_tol: f64,
    pub cd_max_sweeps: usize,
    /// Hard lower bound on every `ψ_i`.
    pub psi_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eta: 0.001,
            em_tol: 1e-7,
            em_max_iter: 2000,
            cd_tol: 1e-7,
            cd_max_sweeps: 500,
            psi_floor: 1e-6,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = self.em_tol > 0.0
            && self.cd_tol > 0.0
            && self.psi_floor > 0.0
            && self.em_max_iter > 0
            && self.cd_max_sweeps > 0;
        if !positive || !(self.eta >= 0.0) {
            return Err(Error::InvalidParameter(
                "solver tolerances must be positive and eta nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Non-fatal conditions met during a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitWarning {
    /// `ψ_i` was clamped to the floor (near-improper solution).
    PsiFloor { variable: usize },
    /// A column with a single nonzero loading was folded into `ψ`.
    SingletonColumn { column: usize },
    /// The one-factor initialization did not converge; eigen start used.
    InitFallback,
    /// The one-factor initialization collapsed toward zero loadings.
    NoCommonVariance,
    /// A random restart during factor expansion failed and was skipped.
    RestartFailed,
}

fn push_warning(list: &mut Vec<FitWarning>, w: FitWarning) {
    if !list.contains(&w) {
        list.push(w);
    }
}

/// Posterior moments of the factors under the current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepCache {
    /// `ΛᵀΨ⁻¹Λ + I_m`
    pub m: DMatrix<f64>,
    /// `m × p`; column `i` is `b_i = M⁻¹ΛᵀΨ⁻¹s_i`.
    pub b: DMatrix<f64>,
    /// `M⁻¹ + M⁻¹ΛᵀΨ⁻¹SΨ⁻¹ΛM⁻¹`
    pub a: DMatrix<f64>,
}

impl EStepCache {
    fn from_capacitance(cap: &Capacitance) -> Self {
        let m_inv = cap.m_inverse();
        let b = &m_inv * cap.sw.transpose();
        let mut a = &m_inv + &b * &cap.w * &m_inv;
        symmetrize(&mut a);
        let mut m = cap.chol.l() * cap.chol.l().transpose();
        symmetrize(&mut m);
        Self { m, b, a }
    }
}

fn symmetrize(x: &mut DMatrix<f64>) {
    let n = x.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (x[(i, j)] + x[(j, i)]);
            x[(i, j)] = v;
            x[(j, i)] = v;
        }
    }
}

pub fn e_step(model: &FactorModel, moments: &SampleMoments) -> Result<EStepCache> {
    Ok(EStepCache::from_capacitance(&Capacitance::new(model, moments)?))
}

/// One coordinate step for `λ_ij`.
///
/// `rho_level` is the calibrated penalty level (see
/// [`PenaltySpec::calibrated_rho`]). The step exactly minimizes
/// `½(λ − θ̃)² + ρP(|λ|; ψ_iρ)/a_jj` with
/// `θ̃ = (b_ij − Σ_{k≠j} a_kj λ_ik) / a_jj`, i.e. the family's threshold
/// at level `ψ_iρ/a_jj` with concavity `γ·a_jj`.
pub fn coordinate_update(
    lambda_row: &[f64],
    i: usize,
    j: usize,
    cache: &EStepCache,
    psi_i: f64,
    rho_level: f64,
    spec: &PenaltySpec,
) -> f64 {
    let a = &cache.a;
    let mut c = cache.b[(j, i)];
    for (k, &l) in lambda_row.iter().enumerate() {
        if k != j {
            c -= a[(k, j)] * l;
        }
    }
    let ajj = a[(j, j)];
    if spec.is_lasso() {
        spec.weighted_threshold(c / ajj, rho_level, psi_i / ajj)
    } else {
        spec.weighted_threshold(c / ajj, psi_i * rho_level, 1.0 / ajj)
    }
}

/// Result of one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub model: FactorModel,
    /// Variables whose `ψ_i` hit the floor.
    pub floored: Vec<usize>,
}

/// Coordinate descent over `Λ` followed by the closed-form `Ψ` update
/// `ψ_i = s_ii − 2λ_iᵀb_i + λ_iᵀAλ_i + η s_ii`.
pub fn m_step(
    cache: &EStepCache,
    moments: &SampleMoments,
    model_in: &FactorModel,
    rho: f64,
    spec: &PenaltySpec,
    options: &SolverOptions,
) -> Result<MStep> {
    let level = spec.calibrated_rho(rho)?;
    m_step_at_level(cache, moments, model_in, level, spec, options)
}

fn m_step_at_level(
    cache: &EStepCache,
    moments: &SampleMoments,
    model_in: &FactorModel,
    level: f64,
    spec: &PenaltySpec,
    options: &SolverOptions,
) -> Result<MStep> {
    let (p, m) = model_in.loadings().shape();
    let mut loadings = model_in.loadings().clone();
    let mut psi = DVector::zeros(p);
    let mut floored = Vec::new();
    let a_chol = if level == 0.0 {
        Some(cache.a.clone().cholesky().ok_or(Error::Numerical {
            min_psi: model_in.psi().min(),
        })?)
    } else {
        None
    };
    let mut row = vec![0.0; m];
    for i in 0..p {
        for j in 0..m {
            row[j] = loadings[(i, j)];
        }
        match &a_chol {
            Some(chol) => {
                let sol = chol.solve(&cache.b.column(i).into_owned());
                row.copy_from_slice(sol.as_slice());
            }
            None => {
                let psi_i = model_in.psi()[i];
                for _ in 0..options.cd_max_sweeps {
                    let mut max_change = 0.0f64;
                    for j in 0..m {
                        let new = coordinate_update(&row, i, j, cache, psi_i, level, spec);
                        max_change = max_change.max((new - row[j]).abs());
                        row[j] = new;
                    }
                    if max_change <= options.cd_tol {
                        break;
                    }
                }
            }
        }
        let mut quad = 0.0;
        let mut cross = 0.0;
        for j in 0..m {
            cross += row[j] * cache.b[(j, i)];
            for k in 0..m {
                quad += row[j] * cache.a[(j, k)] * row[k];
            }
        }
        let s_ii = moments.var(i);
        let residual = s_ii - 2.0 * cross + quad + options.eta * s_ii;
        let value = if level == 0.0 || spec.is_lasso() {
            residual
        } else {
            psi_update(residual, &row, level, spec, model_in.psi()[i], options.psi_floor)
        };
        if !(value > options.psi_floor) {
            floored.push(i);
        }
        psi[i] = value.max(options.psi_floor);
        for j in 0..m {
            loadings[(i, j)] = row[j];
        }
    }
    Ok(MStep {
        model: FactorModel::new(loadings, psi)?,
        floored,
    })
}

/// Maximizer over `ψ ≥ floor` of
/// `−½ log ψ − residual/(2ψ) − Σ_j ρP(|λ_j|; ψρ)/ψ`.
///
/// Between breakpoints every penalty term is `α + β/ψ + δψ`, so each piece
/// has at most two stationary points; all of them and all piece ends are
/// compared, together with the current value.
fn psi_update(
    residual: f64,
    row: &[f64],
    level: f64,
    spec: &PenaltySpec,
    current: f64,
    floor: f64,
) -> f64 {
    let objective = |psi: f64| {
        let pen: f64 = row.iter().map(|&l| spec.row_value(l, level, psi)).sum();
        -0.5 * psi.ln() - residual / (2.0 * psi) - pen
    };
    let g = spec.gamma();
    let mut breaks: Vec<f64> = Vec::with_capacity(2 * row.len() + 1);
    breaks.push(floor);
    for &l in row.iter().filter(|&&l| l != 0.0) {
        let t = l.abs();
        breaks.push(t / (g * level));
        if spec.family() == crate::penalty::PenaltyFamily::Scad {
            breaks.push(t / level);
        }
    }
    breaks.retain(|&b| b >= floor && b.is_finite());
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut best = current.max(floor);
    let mut best_f = objective(best);
    let mut consider = |psi: f64| {
        if psi >= floor && psi.is_finite() {
            let f = objective(psi);
            if f > best_f {
                best = psi;
                best_f = f;
            }
        }
    };
    for (idx, &lo) in breaks.iter().enumerate() {
        let hi = breaks.get(idx + 1).copied().unwrap_or(f64::INFINITY);
        consider(lo);
        // Coefficients of 1/ψ and ψ inside (lo, hi), read off at the midpoint.
        let probe = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo + 1.0 };
        let (mut b, mut d) = (0.5 * residual, 0.0);
        for &l in row.iter().filter(|&&l| l != 0.0) {
            let (beta, delta) = penalty_piece(spec, l.abs(), level, probe);
            b += beta;
            d += delta;
        }
        // stationary points solve dψ² + ψ/2 − b = 0
        if d == 0.0 {
            consider((2.0 * b).clamp(lo, hi));
        } else {
            let disc = 0.25 + 4.0 * d * b;
            if disc >= 0.0 {
                let root = disc.sqrt();
                for r in [(-0.5 + root) / (2.0 * d), (-0.5 - root) / (2.0 * d)] {
                    if r > lo && r < hi {
                        consider(r);
                    }
                }
            }
        }
    }
    best
}

/// `(β, δ)` with `ρP(t; ψρ)/ψ = α + β/ψ + δψ` on the piece containing `psi`.
fn penalty_piece(spec: &PenaltySpec, t: f64, level: f64, psi: f64) -> (f64, f64) {
    let g = spec.gamma();
    let r = psi * level;
    match spec.family() {
        crate::penalty::PenaltyFamily::Mcp => {
            if t < r * g {
                (-t * t / (2.0 * g), 0.0)
            } else {
                (0.0, 0.5 * level * level * g)
            }
        }
        crate::penalty::PenaltyFamily::Scad => {
            if t <= r {
                (0.0, 0.0)
            } else if t <= g * r {
                (-t * t / (2.0 * (g - 1.0)), -level * level / (2.0 * (g - 1.0)))
            } else {
                (0.0, 0.5 * level * level * (g + 1.0))
            }
        }
        crate::penalty::PenaltyFamily::Lasso => (0.0, 0.0),
    }
}

/// Outcome of a penalized fit at one `(ρ, γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: FactorModel,
    pub objective: PenalizedObjectiveValue,
    /// Lasso-scale regularization parameter.
    pub rho: f64,
    /// Calibrated level that entered the penalty.
    pub rho_star: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<FitWarning>,
}

impl FitResult {
    pub fn df(&self) -> usize {
        self.model.nonzero_loadings()
    }
}

fn objective(
    cap: &Capacitance,
    model: &FactorModel,
    moments: &SampleMoments,
    spec: &PenaltySpec,
    level: f64,
    eta: f64,
) -> PenalizedObjectiveValue {
    PenalizedObjectiveValue::new(
        cap.log_likelihood(model, moments),
        penalty_term(model, moments, spec, level),
        eta_term(model, moments, eta),
    )
}

/// Moves every single-entry column of `Λ` into `Ψ`. The implied covariance
/// is unchanged.
pub fn fold_singleton_columns(model: &FactorModel) -> Option<(FactorModel, Vec<usize>)> {
    let (mut loadings, mut psi) = model.clone().into_parts();
    let mut folded = Vec::new();
    for j in 0..loadings.ncols() {
        let single = {
            let col = loadings.column(j);
            let mut nonzero = col.iter().enumerate().filter(|(_, &v)| v != 0.0);
            match (nonzero.next(), nonzero.next()) {
                (Some((a, &v)), None) => Some((a, v)),
                _ => None,
            }
        };
        if let Some((a, v)) = single {
            psi[a] += v * v;
            loadings[(a, j)] = 0.0;
            folded.push(j);
        }
    }
    if folded.is_empty() {
        None
    } else {
        Some((FactorModel::new(loadings, psi).ok()?, folded))
    }
}

/// [`fold_singleton_columns`], kept only when the penalized objective does
/// not drop. The likelihood is unchanged by the fold, but with a concave
/// penalty a larger `ψ_a` can raise the penalty on the rest of row `a`.
fn fold_if_better(
    model: &FactorModel,
    moments: &SampleMoments,
    spec: &PenaltySpec,
    level: f64,
    eta: f64,
) -> Option<(FactorModel, Vec<usize>)> {
    let (folded, cols) = fold_singleton_columns(model)?;
    let cost = |m: &FactorModel| penalty_term(m, moments, spec, level) + eta_term(m, moments, eta);
    (cost(&folded) <= cost(model)).then_some((folded, cols))
}

/// Slack allowed on the per-iteration objective change before the ascent
/// trap fires.
fn ascent_slack(value: f64) -> f64 {
    1e-8 + 1e-12 * value.abs()
}

/// Penalized EM from `init` at lasso-scale `rho`.
pub fn fit(
    moments: &SampleMoments,
    rho: f64,
    spec: &PenaltySpec,
    init: &FactorModel,
    options: &SolverOptions,
) -> Result<FitResult> {
    options.validate()?;
    moments.check_positive_variances()?;
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter("rho must be finite and nonnegative".into()));
    }
    if init.n_vars() != moments.n_vars() {
        return Err(Error::DimensionMismatch {
            expected: moments.n_vars(),
            found: init.n_vars(),
        });
    }
    let level = spec.calibrated_rho(rho)?;
    let mut warnings = Vec::new();
    let mut model = init.clone();
    if let Some((folded, cols)) = fold_if_better(&model, moments, spec, level, options.eta) {
        model = folded;
        for column in cols {
            push_warning(&mut warnings, FitWarning::SingletonColumn { column });
        }
    }
    let mut cap = Capacitance::new(&model, moments)?;
    let mut current = objective(&cap, &model, moments, spec, level, options.eta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.em_max_iter {
        iterations += 1;
        let cache = EStepCache::from_capacitance(&cap);
        let step = m_step_at_level(&cache, moments, &model, level, spec, options)?;
        for variable in step.floored {
            push_warning(&mut warnings, FitWarning::PsiFloor { variable });
        }
        let mut next_model = step.model;
        if let Some((folded, cols)) =
            fold_if_better(&next_model, moments, spec, level, options.eta)
        {
            next_model = folded;
            for column in cols {
                push_warning(&mut warnings, FitWarning::SingletonColumn { column });
            }
        }
        let next_cap = Capacitance::new(&next_model, moments)?;
        let next = objective(&next_cap, &next_model, moments, spec, level, options.eta);
        let change = next.total - current.total;
        if change < -ascent_slack(current.total) {
            return Err(Error::AscentViolation {
                iteration: iterations,
                decrease: -change,
            });
        }
        let relative = change.abs() / current.total.abs().max(1.0);
        model = next_model;
        cap = next_cap;
        current = next;
        if relative <= options.em_tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        model,
        objective: current,
        rho,
        rho_star: level,
        iterations,
        converged,
        warnings,
    })
}

/// Like [`fit`], but also returns the objective after every EM iteration
/// (index 0 is the starting value).
pub fn fit_with_trace(
    moments: &SampleMoments,
    rho: f64,
    spec: &PenaltySpec,
    init: &FactorModel,
    options: &SolverOptions,
) -> Result<(FitResult, Vec<f64>)> {
    let level = spec.calibrated_rho(rho)?;
    let mut trace = Vec::new();
    let mut model = init.clone();
    let mut opts = *options;
    opts.em_max_iter = 1;
    let cap = Capacitance::new(&model, moments)?;
    trace.push(objective(&cap, &model, moments, spec, level, options.eta).total);
    let mut last = None;
    let mut warnings = Vec::new();
    for it in 0..options.em_max_iter {
        let step = fit(moments, rho, spec, &model, &opts)?;
        trace.push(step.objective.total);
        for w in &step.warnings {
            push_warning(&mut warnings, *w);
        }
        model = step.model.clone();
        let done = step.converged;
        last = Some(FitResult {
            iterations: it + 1,
            warnings: warnings.clone(),
            ..step
        });
        if done {
            break;
        }
    }
    Ok((last.expect("at least one iteration"), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn toy_moments() -> SampleMoments {
        let truth = FactorModel::new(
            dmatrix![0.9, 0.0; 0.8, 0.0; 0.7, 0.1; 0.0, 0.8; 0.1, 0.7; 0.0, 0.6],
            dvector![0.19, 0.36, 0.5, 0.36, 0.5, 0.64],
        )
        .unwrap();
        let mut s = truth.implied_covariance();
        s[(0, 4)] += 0.05;
        s[(4, 0)] += 0.05;
        SampleMoments::from_covariance(s, 100).unwrap()
    }

    #[test]
    fn near_zero_loadings_give_identity_moments() {
        let moments = toy_moments();
        let model = FactorModel::new(DMatrix::from_element(6, 2, 1e-8), moments.variances()).unwrap();
        let cache = e_step(&model, &moments).unwrap();
        assert!((cache.m.clone() - DMatrix::identity(2, 2)).amax() < 1e-6);
        assert!((cache.a.clone() - DMatrix::identity(2, 2)).amax() < 1e-6);
    }

    #[test]
    fn scalar_e_step() {
        let l = 0.6;
        let p = 4;
        let model = FactorModel::new(DMatrix::from_element(p, 1, l), DVector::from_element(p, 1.0)).unwrap();
        let s = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.3 });
        let moments = SampleMoments::from_covariance(s.clone(), 20).unwrap();
        let cache = e_step(&model, &moments).unwrap();
        let m = 1.0 + p as f64 * l * l;
        assert!((cache.m[(0, 0)] - m).abs() < 1e-14);
        let col_sum = 1.0 + 0.3 * (p - 1) as f64;
        for i in 0..p {
            assert!((cache.b[(0, i)] - l * col_sum / m).abs() < 1e-14);
        }
        let a = 1.0 / m + (l / m).powi(2) * s.sum();
        assert!((cache.a[(0, 0)] - a).abs() < 1e-13);
    }

    #[test]
    fn zero_stays_zero_and_scalar_lasso_step() {
        let cache = EStepCache {
            m: dmatrix![1.5],
            b: dmatrix![0.0, 0.8],
            a: dmatrix![1.3],
        };
        let spec = PenaltySpec::mcp(2.0).unwrap();
        assert_eq!(coordinate_update(&[0.0], 0, 0, &cache, 0.5, 0.2, &spec), 0.0);
        let lasso = PenaltySpec::lasso();
        let (b, a, psi, rho) = (0.8f64, 1.3, 0.5, 0.2);
        let expected = (b / a).signum() * ((b / a).abs() - psi * rho / a).max(0.0);
        let got = coordinate_update(&[0.3], 1, 0, &cache, psi, rho, &lasso);
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn psi_update_eta_shift_and_zero_row() {
        let moments = toy_moments();
        let model = FactorModel::new(
            dmatrix![0.8, 0.1; 0.7, 0.0; 0.6, 0.1; 0.1, 0.7; 0.0, 0.6; 0.1, 0.5],
            DVector::from_element(6, 0.5),
        )
        .unwrap();
        let cache = e_step(&model, &moments).unwrap();
        let spec = PenaltySpec::lasso();
        let mut o0 = SolverOptions::default();
        o0.eta = 0.0;
        let o1 = SolverOptions::default();
        let a = m_step(&cache, &moments, &model, 0.05, &spec, &o0).unwrap();
        let b = m_step(&cache, &moments, &model, 0.05, &spec, &o1).unwrap();
        for i in 0..6 {
            let diff = b.model.psi()[i] - a.model.psi()[i];
            assert!((diff - 0.001 * moments.var(i)).abs() < 1e-14);
        }
        let big = m_step(&cache, &moments, &model, 100.0, &spec, &o1).unwrap();
        assert!(big.model.loadings().iter().all(|&v| v == 0.0));
        for i in 0..6 {
            assert!((big.model.psi()[i] - moments.var(i) * 1.001).abs() < 1e-14);
        }
    }

    #[test]
    fn huge_rho_gives_zero_loadings() {
        let moments = toy_moments();
        let init = FactorModel::new(
            dmatrix![0.8, 0.0; 0.7, 0.0; 0.6, 0.0; 0.5, 0.0; 0.4, 0.0; 0.3, 0.0],
            DVector::from_element(6, 0.5),
        )
        .unwrap();
        let res = fit(&moments, 50.0, &PenaltySpec::mcp(3.0).unwrap(), &init, &SolverOptions::default()).unwrap();
        assert_eq!(res.df(), 0);
        for i in 0..6 {
            assert!((res.model.psi()[i] - moments.var(i) * 1.001).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        let moments = toy_moments();
        let init = FactorModel::new(
            dmatrix![0.8, 0.3; 0.7, 0.2; 0.6, -0.1; 0.5, 0.4; 0.4, 0.3; 0.3, 0.2],
            DVector::from_element(6, 0.5),
        )
        .unwrap();
        for spec in [PenaltySpec::lasso(), PenaltySpec::mcp(1.5).unwrap(), PenaltySpec::scad(3.7).unwrap()] {
            let (_, trace) = fit_with_trace(&moments, 0.02, &spec, &init, &SolverOptions::default()).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "{spec:?}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn singleton_columns_are_folded() {
        let model = FactorModel::new(dmatrix![0.7, 0.0; 0.6, 0.4; 0.5, 0.0], dvector![0.3, 0.2, 0.4]).unwrap();
        let (folded, cols) = fold_singleton_columns(&model).unwrap();
        assert_eq!(cols, vec![1]);
        assert_eq!(folded.loadings()[(1, 1)], 0.0);
        assert!((folded.psi()[1] - 0.36).abs() < 1e-15);
        assert!((folded.implied_covariance() - model.implied_covariance()).amax() < 1e-15);
    }
}
