//! Small dense helpers shared by the initializers.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
// Only needed when std is absent from the dependency graph.
#[allow(unused_imports)]
use num_traits::Float;

use crate::model::SampleMoments;

/// Above this many variables the leading eigenpairs come from subspace
/// iteration instead of a full decomposition.
const DENSE_EIGEN_LIMIT: usize = 200;

/// The `k` largest eigenvalues of `S` (descending) and their eigenvectors
/// as columns. Each eigenvector is signed so its largest-magnitude entry is
/// positive.
pub(crate) fn leading_eigenpairs(moments: &SampleMoments, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let p = moments.n_vars();
    let k = k.min(p);
    let (values, mut vectors) = if p <= DENSE_EIGEN_LIMIT {
        dense_pairs(moments.cov(), k)
    } else {
        subspace_pairs(moments, k)
    };
    for j in 0..k {
        let mut col = vectors.column_mut(j);
        let pivot = col.iter().copied().fold(0.0f64, |best, v| {
            if v.abs() > best.abs() {
                v
            } else {
                best
            }
        });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    (values, vectors)
}

fn dense_pairs(cov: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..cov.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(cov.nrows(), k, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn subspace_pairs(moments: &SampleMoments, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let p = moments.n_vars();
    // Block size a little above k speeds convergence of the k-th pair.
    let block = (k + 4).min(p);
    // Deterministic, well-spread start.
    let mut q = DMatrix::from_fn(p, block, |i, j| {
        let x = ((i + 1) as f64 * (j as f64 + 1.618_033_988_75)).sin();
        x + if i % block == j { 1.0 } else { 0.0 }
    });
    q = q.qr().q();
    let mut values: DVector<f64> = DVector::zeros(block);
    let mut vectors = q.clone();
    for _ in 0..1000 {
        let sq = moments.cov_times(&q);
        let small = q.tr_mul(&sq);
        let small = (&small + small.transpose()) * 0.5;
        let eig = small.symmetric_eigen();
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let rot = DMatrix::from_fn(block, block, |r, c| eig.eigenvectors[(r, order[c])]);
        let new_values = DVector::from_iterator(block, order.iter().map(|&i| eig.eigenvalues[i]));
        vectors = &q * &rot;
        let settled = (0..k).all(|j| {
            (new_values[j] - values[j]).abs() <= 1e-13 * new_values[0].abs().max(f64::MIN_POSITIVE)
        });
        values = new_values;
        if settled {
            break;
        }
        q = (sq * rot).qr().q();
    }
    (
        values.iter().take(k).copied().collect(),
        vectors.columns(0, k).into_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_covariance;

    #[test]
    fn subspace_matches_dense() {
        let data = DMatrix::from_fn(30, 12, |i, j| {
            ((i * 7 + j * 3) as f64).sin() + if j < 4 { (i as f64).cos() } else { 0.0 }
        });
        let moments = sample_covariance(&data).unwrap();
        let (dv, dvec) = dense_pairs(moments.cov(), 3);
        let (sv, svec) = subspace_pairs(&moments, 3);
        for j in 0..3 {
            assert!((dv[j] - sv[j]).abs() < 1e-10 * dv[0]);
            let dot = dvec.column(j).dot(&svec.column(j)).abs();
            assert!((dot - 1.0).abs() < 1e-6, "pair {j}: {dot}");
        }
    }
}
