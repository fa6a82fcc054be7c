//! Two-step baseline: maximum likelihood followed by orthogonal rotation.
//!
//! Rotations are found by orthogonal gradient projection with step
//! halving. The L1 loss is smoothed as `√(λ² + ε²)` and `ε` is annealed
//! toward zero across stages.

use alloc::vec::Vec;

use nalgebra::DMatrix;
// Only needed when std is absent from the dependency graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::SampleMoments;
use crate::path::eigen_start;
use crate::penalty::PenaltySpec;
use crate::solver::{fit, FitResult, SolverOptions};

/// Number of starting rotations (the identity plus random draws).
pub const ROTATION_STARTS: usize = 30;

const L1_SMOOTHING: [f64; 4] = [1e-6, 1e-7, 1e-8, 1e-9];
const GP_MAX_ITER: usize = 2000;
const GP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RotationCriterion {
    Varimax,
    L1,
}

impl RotationCriterion {
    pub fn name(self) -> &'static str {
        match self {
            RotationCriterion::Varimax => "varimax",
            RotationCriterion::L1 => "l1",
        }
    }
}

impl core::str::FromStr for RotationCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "varimax" => Ok(RotationCriterion::Varimax),
            "l1" => Ok(RotationCriterion::L1),
            other => Err(Error::InvalidParameter(alloc::format!(
                "unknown rotation criterion `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationResult {
    pub loadings: DMatrix<f64>,
    /// Orthogonal `T` with `loadings = Λ·T`.
    pub rotation: DMatrix<f64>,
    /// `Σ|λ_ij|` for L1; the (maximized) varimax criterion otherwise.
    pub criterion_value: f64,
    pub iterations: usize,
}

/// Unpenalized maximum likelihood fit from the `m`-column eigen start.
pub fn ml_fit(moments: &SampleMoments, m: usize, options: &SolverOptions) -> Result<FitResult> {
    if m == 0 {
        return Err(Error::InvalidParameter("number of factors must be at least 1".into()));
    }
    moments.check_positive_variances()?;
    let start = eigen_start(moments, m, options.psi_floor);
    fit(moments, 0.0, &PenaltySpec::lasso(), &start, options)
}

/// Minimizes `criterion` over orthogonal rotations of `loadings`.
pub fn rotate(loadings: &DMatrix<f64>, criterion: RotationCriterion, seed: u64) -> RotationResult {
    let m = loadings.ncols();
    if m < 2 {
        return RotationResult {
            loadings: loadings.clone(),
            rotation: DMatrix::identity(m, m),
            criterion_value: exact_value(loadings, criterion),
            iterations: 0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, DMatrix<f64>, usize)> = None;
    for start in 0..ROTATION_STARTS {
        let t0 = if start == 0 {
            DMatrix::identity(m, m)
        } else {
            random_orthogonal(m, &mut rng)
        };
        let (t, iterations) = match criterion {
            RotationCriterion::Varimax => gp_orthogonal(loadings, t0, varimax, None),
            RotationCriterion::L1 => {
                let mut t = t0;
                let mut total = 0;
                for eps in L1_SMOOTHING {
                    let (next, it) = gp_orthogonal(loadings, t, |l| smooth_l1(l, eps), None);
                    t = next;
                    total += it;
                }
                (t, total)
            }
        };
        let value = minimized_value(&(loadings * &t), criterion);
        if best.as_ref().map_or(true, |b| value < b.0) {
            best = Some((value, t, iterations));
        }
    }
    let (_, t, iterations) = best.expect("at least one start");
    let t = canonical_order(loadings, t);
    let rotated = loadings * &t;
    RotationResult {
        criterion_value: exact_value(&rotated, criterion),
        loadings: rotated,
        rotation: t,
        iterations,
    }
}

/// `ml_fit` followed by `rotate`.
pub fn two_step(
    moments: &SampleMoments,
    m: usize,
    criterion: RotationCriterion,
    options: &SolverOptions,
    seed: u64,
) -> Result<(FitResult, RotationResult)> {
    let ml = ml_fit(moments, m, options)?;
    let rotated = rotate(ml.model.loadings(), criterion, seed);
    Ok((ml, rotated))
}

fn exact_value(l: &DMatrix<f64>, criterion: RotationCriterion) -> f64 {
    match criterion {
        RotationCriterion::L1 => l.iter().map(|v| v.abs()).sum(),
        RotationCriterion::Varimax => -varimax(l).0,
    }
}

fn minimized_value(l: &DMatrix<f64>, criterion: RotationCriterion) -> f64 {
    match criterion {
        RotationCriterion::L1 => l.iter().map(|v| v.abs()).sum(),
        RotationCriterion::Varimax => varimax(l).0,
    }
}

/// Negated varimax criterion `−‖L² − colmeans(L²)‖²/4` and its gradient.
fn varimax(l: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let p = l.nrows() as f64;
    let sq = l.map(|v| v * v);
    let mut centered = sq.clone();
    for j in 0..sq.ncols() {
        let mean = sq.column(j).sum() / p;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let f = -centered.norm_squared() / 4.0;
    let grad = -l.component_mul(&centered);
    (f, grad)
}

fn smooth_l1(l: &DMatrix<f64>, eps: f64) -> (f64, DMatrix<f64>) {
    let root = l.map(|v| (v * v + eps * eps).sqrt());
    let grad = l.zip_map(&root, |v, r| v / r);
    (root.sum(), grad)
}

/// Orthogonal gradient projection from `t`. Returns the final rotation and
/// the iteration count.
fn gp_orthogonal<F>(
    a: &DMatrix<f64>,
    mut t: DMatrix<f64>,
    vgq: F,
    trace: Option<&mut Vec<f64>>,
) -> (DMatrix<f64>, usize)
where
    F: Fn(&DMatrix<f64>) -> (f64, DMatrix<f64>),
{
    let mut trace = trace;
    let (mut f, gq) = vgq(&(a * &t));
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(f);
    }
    let mut g = a.tr_mul(&gq);
    let mut alpha = 1.0;
    for iter in 0..GP_MAX_ITER {
        let mt = t.tr_mul(&g);
        let sym = (&mt + mt.transpose()) * 0.5;
        let gp = &g - &t * sym;
        let s = gp.norm();
        if s < GP_TOL {
            return (t, iter);
        }
        alpha *= 2.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let candidate = polar(&(&t - &gp * alpha));
            let (ft, gqt) = vgq(&(a * &candidate));
            if ft < f - 0.5 * s * s * alpha {
                accepted = Some((candidate, ft, gqt));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((candidate, ft, gqt)) => {
                t = candidate;
                f = ft;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.push(f);
                }
                g = a.tr_mul(&gqt);
            }
            None => return (t, iter),
        }
    }
    (t, GP_MAX_ITER)
}

/// Orthogonal polar factor `UVᵀ`.
fn polar(x: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    u * v_t
}

fn random_orthogonal(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let z = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let qr = z.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orders columns by sum of squares (descending) and flips each so its
/// largest-magnitude entry is positive. Applied to `T` so that `Λ·T` still
/// gives the rotated loadings.
fn canonical_order(a: &DMatrix<f64>, t: DMatrix<f64>) -> DMatrix<f64> {
    let l = a * &t;
    let m = l.ncols();
    let mut order: Vec<usize> = (0..m).collect();
    let ss: Vec<f64> = (0..m).map(|j| l.column(j).norm_squared()).collect();
    order.sort_by(|&x, &y| ss[y].total_cmp(&ss[x]));
    let mut out = DMatrix::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        let col = l.column(src);
        let pivot = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        out.set_column(dst, &(t.column(src) * sign));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equal_magnitude() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            6,
            2,
            &[0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, -0.6, 0.6, -0.6, 0.6, -0.6],
        )
    }

    #[test]
    fn l1_recovers_simple_structure() {
        let res = rotate(&equal_magnitude(), RotationCriterion::L1, 7);
        let norm = (0.72f64).sqrt();
        for i in 0..6 {
            let row = res.loadings.row(i);
            let (big, small) = if row[0].abs() > row[1].abs() {
                (row[0].abs(), row[1].abs())
            } else {
                (row[1].abs(), row[0].abs())
            };
            assert!(small <= 1e-4, "row {i}: {row}");
            assert!((big - norm).abs() < 1e-3);
        }
    }

    #[test]
    fn rotation_is_orthogonal_and_consistent() {
        let a = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j * 5) as f64).sin());
        for c in [RotationCriterion::Varimax, RotationCriterion::L1] {
            let res = rotate(&a, c, 1);
            let t = &res.rotation;
            assert!((t.tr_mul(t) - DMatrix::identity(3, 3)).abs().max() < 1e-9);
            assert!((&a * t - &res.loadings).abs().max() < 1e-9);
            for i in 0..7 {
                let before = a.row(i).norm_squared();
                let after = res.loadings.row(i).norm_squared();
                assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_factor_is_identity() {
        let a = DMatrix::from_column_slice(3, 1, &[-0.5, 0.2, 0.1]);
        let res = rotate(&a, RotationCriterion::Varimax, 0);
        assert_eq!(res.rotation, DMatrix::identity(1, 1));
        assert_eq!(res.loadings, a);
    }

    #[test]
    fn simple_structure_is_kept() {
        let a = DMatrix::from_row_slice(4, 2, &[0.9, 0.0, 0.7, 0.0, 0.0, 0.8, 0.0, 0.5]);
        let res = rotate(&a, RotationCriterion::L1, 3);
        assert!((res.loadings.abs() - a.abs()).abs().max() < 1e-6);
        assert!((res.criterion_value - 2.9).abs() < 1e-6);
    }

    #[test]
    fn smoothed_l1_decreases_along_iterations() {
        let a = DMatrix::from_fn(6, 2, |i, j| ((i + 2 * j) as f64).cos());
        let mut trace = Vec::new();
        gp_orthogonal(&a, DMatrix::identity(2, 2), |l| smooth_l1(l, 1e-6), Some(&mut trace));
        assert!(trace.len() > 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
