//! Monte Carlo harness: data generation, column alignment and recovery
//! metrics.
//!
//! [`run_replication`] is the unit of work and [`summarize`] the reduction,
//! so callers can spread replications over threads and still obtain the
//! same report as [`run_study`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
// Only needed when std is absent from the dependency graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{sample_covariance, FactorModel};
use crate::path::{fit_path_from, prepare_path, PathGrid, PathOptions};
use crate::penalty::PenaltyFamily;
use crate::rotation::{rotate, RotationCriterion};
use crate::selection::{select_in_rows, Criterion};
use crate::solver::FitResult;

/// Largest factor count aligned by exhaustive permutation search.
pub const EXACT_ALIGN_MAX: usize = 8;

fn with_unit_variances(loadings: DMatrix<f64>) -> FactorModel {
    let psi = DVector::from_fn(loadings.nrows(), |i, _| 1.0 - loadings.row(i).norm_squared());
    FactorModel::new(loadings, psi).expect("valid design")
}

/// Six variables, two factors with three loadings each.
pub fn model_a() -> FactorModel {
    let mut l = DMatrix::zeros(6, 2);
    for (i, v) in [0.95, 0.90, 0.85].iter().enumerate() {
        l[(i, 0)] = *v;
    }
    for (i, v) in [0.80, 0.75, 0.70].iter().enumerate() {
        l[(i + 3, 1)] = *v;
    }
    with_unit_variances(l)
}

/// 1000 variables in four blocks of 250 with loadings 0.95, 0.90, 0.85, 0.80.
pub fn model_b() -> FactorModel {
    let mut l = DMatrix::zeros(1000, 4);
    for (j, v) in [0.95, 0.90, 0.85, 0.80].iter().enumerate() {
        for i in 0..250 {
            l[(250 * j + i, j)] = *v;
        }
    }
    with_unit_variances(l)
}

/// `N × p` draws of `Λz + Ψ^{1/2}e`.
pub fn generate(model: &FactorModel, n: usize, seed: u64) -> DMatrix<f64> {
    let p = model.n_vars();
    let m = model.n_factors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = model.psi().iter().map(|v| v.sqrt()).collect();
    let lambda = model.loadings();
    let mut data = DMatrix::zeros(n, p);
    let mut z = vec![0.0; m];
    for r in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            let mut x = sd[i] * e;
            for j in 0..m {
                x += lambda[(i, j)] * z[j];
            }
            data[(r, i)] = x;
        }
    }
    data
}

/// Column permutation and signs applied by [`align`].
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `perm[j]` is the estimated column placed at position `j`.
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
    /// True when the greedy fallback was used.
    pub greedy: bool,
}

impl Alignment {
    pub fn apply(&self, est: &FactorModel) -> FactorModel {
        let l = est.loadings();
        let mut out = DMatrix::zeros(l.nrows(), l.ncols());
        for (j, (&src, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            out.set_column(j, &(l.column(src) * s));
        }
        FactorModel::new(out, est.psi().clone()).expect("aligned copy of a valid model")
    }
}

/// Permutation and signs of `est`'s columns maximizing the summed absolute
/// inner products with `truth`'s columns.
pub fn find_alignment(est: &FactorModel, truth: &FactorModel) -> Result<Alignment> {
    if est.n_vars() != truth.n_vars() || est.n_factors() != truth.n_factors() {
        return Err(Error::DimensionMismatch {
            expected: truth.n_vars() * truth.n_factors(),
            found: est.n_vars() * est.n_factors(),
        });
    }
    let m = est.n_factors();
    let score = est.loadings().tr_mul(truth.loadings());
    let (perm, greedy) = if m <= EXACT_ALIGN_MAX {
        (best_permutation(&score), false)
    } else {
        (greedy_permutation(&score), true)
    };
    let signs = perm
        .iter()
        .enumerate()
        .map(|(j, &src)| if score[(src, j)] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    Ok(Alignment {
        perm,
        signs,
        greedy,
    })
}

/// Applies [`find_alignment`] to `est`.
pub fn align(est: &FactorModel, truth: &FactorModel) -> Result<FactorModel> {
    Ok(find_alignment(est, truth)?.apply(est))
}

fn best_permutation(score: &DMatrix<f64>) -> Vec<usize> {
    let m = score.nrows();
    let mut perm: Vec<usize> = (0..m).collect();
    let total = |perm: &[usize]| -> f64 {
        perm.iter().enumerate().map(|(j, &src)| score[(src, j)].abs()).sum()
    };
    let mut best = perm.clone();
    let mut best_value = total(&perm);
    // Heap's algorithm
    let mut c = vec![0usize; m];
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let value = total(&perm);
            if value > best_value {
                best_value = value;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn greedy_permutation(score: &DMatrix<f64>) -> Vec<usize> {
    let m = score.nrows();
    let mut perm = vec![usize::MAX; m];
    let mut used_src = vec![false; m];
    for _ in 0..m {
        let mut pick = (0, 0, -1.0);
        for src in (0..m).filter(|&s| !used_src[s]) {
            for dst in (0..m).filter(|&d| perm[d] == usize::MAX) {
                let v = score[(src, dst)].abs();
                if v > pick.2 {
                    pick = (src, dst, v);
                }
            }
        }
        used_src[pick.0] = true;
        perm[pick.1] = pick.0;
    }
    perm
}

/// Recovery measures of one aligned estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicationMetrics {
    /// `‖Λ − Λ̂‖²_F / (pm)`
    pub mse_lambda: f64,
    /// `‖ψ − ψ̂‖² / p`
    pub mse_psi: f64,
    /// Share of true nonzero loadings estimated nonzero (1 when there are none).
    pub tpr: f64,
    /// Share of true zero loadings estimated exactly zero (1 when there are none).
    pub tnr: f64,
}

pub fn replication_metrics(aligned: &FactorModel, truth: &FactorModel) -> ReplicationMetrics {
    let (p, m) = truth.loadings().shape();
    let diff = truth.loadings() - aligned.loadings();
    let psi_diff = truth.psi() - aligned.psi();
    let (mut pos, mut tp, mut neg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (t, e) in truth.loadings().iter().zip(aligned.loadings().iter()) {
        if *t != 0.0 {
            pos += 1;
            tp += (*e != 0.0) as usize;
        } else {
            neg += 1;
            tn += (*e == 0.0) as usize;
        }
    }
    let rate = |hit: usize, total: usize| if total == 0 { 1.0 } else { hit as f64 / total as f64 };
    ReplicationMetrics {
        mse_lambda: diff.norm_squared() / (p * m) as f64,
        mse_psi: psi_diff.norm_squared() / p as f64,
        tpr: rate(tp, pos),
        tnr: rate(tn, neg),
    }
}

/// Means over replications with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyMetrics {
    pub mse_lambda: f64,
    pub mse_psi: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub se_mse_lambda: f64,
    pub se_mse_psi: f64,
    pub se_tpr: f64,
    pub se_tnr: f64,
    pub replications: usize,
}

impl StudyMetrics {
    pub fn from_replications(reps: &[ReplicationMetrics]) -> Self {
        let n = reps.len();
        let stat = |f: fn(&ReplicationMetrics) -> f64| -> (f64, f64) {
            if n == 0 {
                return (f64::NAN, f64::NAN);
            }
            let mean = reps.iter().map(f).sum::<f64>() / n as f64;
            if n < 2 {
                return (mean, 0.0);
            }
            let var = reps.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (mean, (var / n as f64).sqrt())
        };
        let (mse_lambda, se_mse_lambda) = stat(|r| r.mse_lambda);
        let (mse_psi, se_mse_psi) = stat(|r| r.mse_psi);
        let (tpr, se_tpr) = stat(|r| r.tpr);
        let (tnr, se_tnr) = stat(|r| r.tnr);
        Self {
            mse_lambda,
            mse_psi,
            tpr,
            tnr,
            se_mse_lambda,
            se_mse_psi,
            se_tpr,
            se_tnr,
            replications: n,
        }
    }
}

/// Estimation method of a report row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Penalized {
        family: PenaltyFamily,
        gamma: f64,
        criterion: Criterion,
    },
    Rotation(RotationCriterion),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Penalized { gamma, .. } if gamma.is_infinite() => "lasso".into(),
            Method::Penalized { family, gamma, .. } => format!("{}(gamma={gamma})", family.name()),
            Method::Rotation(c) => c.name().into(),
        }
    }

    pub fn criterion(&self) -> Option<Criterion> {
        match self {
            Method::Penalized { criterion, .. } => Some(*criterion),
            Method::Rotation(_) => None,
        }
    }
}

/// True model of a study.
#[derive(Debug, Clone, PartialEq)]
pub enum TrueModel {
    A,
    B,
    Custom(FactorModel),
}

impl TrueModel {
    pub fn model(&self) -> FactorModel {
        match self {
            TrueModel::A => model_a(),
            TrueModel::B => model_b(),
            TrueModel::Custom(m) => m.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrueModel::A => "A",
            TrueModel::B => "B",
            TrueModel::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub model: TrueModel,
    pub n: usize,
    pub replications: usize,
    pub family: PenaltyFamily,
    /// Concave members traced after the lasso row.
    pub gammas: Vec<f64>,
    pub criteria: Vec<Criterion>,
    /// Two-step baselines, run only when `N > p`.
    pub rotations: Vec<RotationCriterion>,
    pub seed: u64,
    pub path: PathOptions,
}

impl StudyConfig {
    pub fn new(model: TrueModel, n: usize, replications: usize, seed: u64) -> Self {
        Self {
            model,
            n,
            replications,
            family: PenaltyFamily::Mcp,
            gammas: vec![1.96],
            criteria: Criterion::ALL.to_vec(),
            rotations: vec![RotationCriterion::Varimax, RotationCriterion::L1],
            seed,
            path: PathOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(Error::InsufficientData(self.n));
        }
        if self.criteria.is_empty() {
            return Err(Error::InvalidParameter("at least one criterion is required".into()));
        }
        Ok(())
    }

    /// Rows of the report, in output order.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = Vec::new();
        let mut gammas = vec![f64::INFINITY];
        if self.family != PenaltyFamily::Lasso {
            gammas.extend(self.gammas.iter().copied());
        }
        for &gamma in &gammas {
            for &criterion in &self.criteria {
                let family = if gamma.is_infinite() {
                    PenaltyFamily::Lasso
                } else {
                    self.family
                };
                out.push(Method::Penalized {
                    family,
                    gamma,
                    criterion,
                });
            }
        }
        if self.n > self.model.model().n_vars() {
            out.extend(self.rotations.iter().map(|&c| Method::Rotation(c)));
        }
        out
    }

    /// Seed of replication `rep`, split from the master seed.
    pub fn replication_seed(&self, rep: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng.next_u64()
    }
}

/// Metrics of one replication, one entry per method in [`StudyConfig::methods`].
pub type ReplicationOutcome = Vec<ReplicationMetrics>;

/// Runs one replication: generate, fit the path, select, align, score.
pub fn run_replication(config: &StudyConfig, rep: usize) -> Result<ReplicationOutcome> {
    let truth = config.model.model();
    let m = truth.n_factors();
    let seed = config.replication_seed(rep);
    let data = generate(&truth, config.n, seed);
    let moments = sample_covariance(&data)?;
    let methods = config.methods();

    let (init, default_grid) = prepare_path(&moments, m, config.family, &config.path)?;
    let mut gammas = vec![f64::INFINITY];
    if config.family != PenaltyFamily::Lasso {
        let mut g = config.gammas.clone();
        g.sort_by(|a, b| b.total_cmp(a));
        g.dedup();
        gammas.extend(g);
    }
    let grid = PathGrid::new(default_grid.rhos().to_vec(), gammas.clone())?;
    let path = fit_path_from(&moments, &init, grid, config.family, &config.path, seed)?;

    let mut ml: Option<FitResult> = None;
    let mut out = Vec::with_capacity(methods.len());
    for method in &methods {
        let estimate = match *method {
            Method::Penalized {
                gamma, criterion, ..
            } => {
                let t = gammas
                    .iter()
                    .position(|&g| g == gamma)
                    .expect("gamma row present");
                let (t, k) = select_in_rows(&path, criterion, [t])
                    .ok_or_else(|| Error::InvalidData("no cell has a finite criterion".into()))?;
                path.cells[t][k].fit.model.clone()
            }
            Method::Rotation(c) => {
                if ml.is_none() {
                    ml = Some(crate::rotation::ml_fit(&moments, m, &config.path.solver)?);
                }
                let fit = ml.as_ref().expect("set above");
                let rotated = rotate(fit.model.loadings(), c, seed);
                FactorModel::new(rotated.loadings, fit.model.psi().clone())?
            }
        };
        let aligned = align(&estimate, &truth)?;
        out.push(replication_metrics(&aligned, &truth));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub metrics: StudyMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub model: &'static str,
    pub n: usize,
    pub replications: usize,
    /// Replications that failed, with the error text.
    pub failures: Vec<(usize, String)>,
    pub rows: Vec<ReportRow>,
}

/// Reduces per-replication outcomes (in replication order).
pub fn summarize(config: &StudyConfig, outcomes: &[Result<ReplicationOutcome>]) -> StudyReport {
    let methods = config.methods();
    let mut per_method: Vec<Vec<ReplicationMetrics>> = vec![Vec::new(); methods.len()];
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes.iter().enumerate() {
        match outcome {
            Ok(values) => {
                for (slot, v) in per_method.iter_mut().zip(values) {
                    slot.push(*v);
                }
            }
            Err(e) => failures.push((rep, format!("{e}"))),
        }
    }
    StudyReport {
        model: config.model.name(),
        n: config.n,
        replications: outcomes.len(),
        failures,
        rows: methods
            .into_iter()
            .zip(per_method)
            .map(|(method, reps)| ReportRow {
                method,
                metrics: StudyMetrics::from_replications(&reps),
            })
            .collect(),
    }
}

/// Runs every replication in sequence.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let outcomes: Vec<_> = (0..config.replications)
        .map(|rep| run_replication(config, rep))
        .collect();
    Ok(summarize(config, &outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_a_design() {
        let a = model_a();
        assert!((a.psi()[0] - 0.0975).abs() < 1e-15);
        let sigma = a.implied_covariance();
        for i in 0..6 {
            assert!((sigma[(i, i)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn model_b_design() {
        let b = model_b();
        assert_eq!(b.n_vars(), 1000);
        assert_eq!(b.nonzero_loadings(), 1000);
        assert_eq!(b.loadings().len(), 4000);
    }

    #[test]
    fn generation_is_repeatable() {
        let a = model_a();
        assert_eq!(generate(&a, 20, 5), generate(&a, 20, 5));
        assert_ne!(generate(&a, 20, 5), generate(&a, 20, 6));
    }

    #[test]
    fn swapped_and_negated_columns_are_restored() {
        let truth = model_a();
        let mut l = truth.loadings().clone();
        l.swap_columns(0, 1);
        l.column_mut(0).neg_mut();
        let est = FactorModel::new(l, truth.psi().clone()).unwrap();
        assert_eq!(align(&est, &truth).unwrap(), truth);
        assert_eq!(align(&truth, &truth).unwrap(), truth);
    }

    #[test]
    fn metrics_of_truth_and_zero() {
        let truth = model_a();
        let m = replication_metrics(&truth, &truth);
        assert_eq!((m.mse_lambda, m.mse_psi, m.tpr, m.tnr), (0.0, 0.0, 1.0, 1.0));
        let zero = FactorModel::new(DMatrix::zeros(6, 2), truth.psi().clone()).unwrap();
        let m = replication_metrics(&zero, &truth);
        assert_eq!((m.tpr, m.tnr), (0.0, 1.0));
        assert!((m.mse_lambda - truth.loadings().norm_squared() / 12.0).abs() < 1e-15);
    }

    #[test]
    fn greedy_agrees_on_clear_cases() {
        let score = DMatrix::from_row_slice(3, 3, &[0.1, 0.9, 0.0, 0.0, 0.2, -0.8, 0.7, 0.0, 0.1]);
        assert_eq!(greedy_permutation(&score), best_permutation(&score));
    }
}
