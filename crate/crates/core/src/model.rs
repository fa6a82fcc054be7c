//! Sufficient statistics, the factor model, and likelihood evaluation.
//!
//! The implied covariance `Σ = ΛΛᵀ + Ψ` is never inverted densely. Every
//! quantity is routed through the `m × m` capacitance matrix
//! `M = I + ΛᵀΨ⁻¹Λ` and the product `S·Ψ⁻¹Λ`, so a fit with `p = 1000`
//! variables and a handful of factors stays cheap.

use alloc::format;
use core::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
// Only needed when std is absent from the dependency graph.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::penalty::PenaltySpec;

/// Condition-number estimate of `Σ` above which a model is treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// Sample covariance `S` (maximum-likelihood denominator `N`) with its sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    cov: DMatrix<f64>,
    n: usize,
    /// Centered data scaled by `1/√N`, kept when `N < p` so that `S·W`
    /// can be formed as `Zᵀ(ZW)`.
    factor: Option<DMatrix<f64>>,
}

impl SampleMoments {
    /// Wraps a user-supplied covariance matrix after checking it is finite,
    /// symmetric and positive semidefinite.
    pub fn from_covariance(cov: DMatrix<f64>, n: usize) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(Error::DimensionMismatch {
                expected: cov.nrows(),
                found: cov.ncols(),
            });
        }
        if cov.nrows() == 0 {
            return Err(Error::InvalidData("covariance matrix is empty".into()));
        }
        if n < 2 {
            return Err(Error::InsufficientData(n));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("covariance has non-finite entries".into()));
        }
        let scale = cov.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let p = cov.nrows();
        for i in 0..p {
            for j in (i + 1)..p {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidData(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigenvalues();
        let max_eig = eig.iter().fold(0.0f64, |acc, v| acc.max(*v));
        if eig.iter().any(|&e| e < -1e-10 * max_eig.max(f64::MIN_POSITIVE)) {
            return Err(Error::InvalidData(
                "covariance is not positive semidefinite".into(),
            ));
        }
        Ok(Self {
            cov: sym,
            n,
            factor: None,
        })
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_vars(&self) -> usize {
        self.cov.nrows()
    }

    /// Diagonal entry `s_ii`.
    pub fn var(&self, i: usize) -> f64 {
        self.cov[(i, i)]
    }

    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }

    /// `S · w` for a thin matrix `w` (`p × k`).
    pub fn cov_times(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Some(z) => z.tr_mul(&(z * w)),
            None => &self.cov * w,
        }
    }

    /// Rejects variables with zero sample variance.
    pub fn check_positive_variances(&self) -> Result<()> {
        match (0..self.n_vars()).find(|&i| self.var(i) <= 0.0) {
            Some(index) => Err(Error::DegenerateVariance { index }),
            None => Ok(()),
        }
    }

    /// Rescales to the correlation matrix.
    pub fn standardized(&self) -> Result<Self> {
        self.check_positive_variances()?;
        let p = self.n_vars();
        let inv_sd = DVector::from_iterator(p, (0..p).map(|i| 1.0 / self.var(i).sqrt()));
        let mut cov = self.cov.clone();
        for j in 0..p {
            for i in 0..p {
                cov[(i, j)] *= inv_sd[i] * inv_sd[j];
            }
        }
        for i in 0..p {
            cov[(i, i)] = 1.0;
        }
        let factor = self.factor.as_ref().map(|z| {
            let mut z = z.clone();
            for j in 0..p {
                z.column_mut(j).scale_mut(inv_sd[j]);
            }
            z
        });
        Ok(Self {
            cov,
            n: self.n,
            factor,
        })
    }

    /// Multiplies `S` by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            cov: &self.cov * c,
            n: self.n,
            factor: self.factor.as_ref().map(|z| z * c.sqrt()),
        }
    }
}

/// Maximum-likelihood sample covariance of an `N × p` data matrix
/// (rows are observations).
pub fn sample_covariance(data: &DMatrix<f64>) -> Result<SampleMoments> {
    let (n, p) = data.shape();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("data contain non-finite values".into()));
    }
    if n < 2 {
        return Err(Error::InsufficientData(n));
    }
    if p == 0 {
        return Err(Error::InvalidData("data have no columns".into()));
    }
    let mut centered = data.clone();
    for j in 0..p {
        let mean = centered.column(j).sum() / n as f64;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    centered /= (n as f64).sqrt();
    let mut cov = centered.tr_mul(&centered);
    // exact symmetry
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let factor = (n < p).then_some(centered);
    Ok(SampleMoments { cov, n, factor })
}

/// Loadings `Λ` (`p × m`) and unique variances `ψ` (`p`).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    loadings: DMatrix<f64>,
    psi: DVector<f64>,
}

impl FactorModel {
    pub fn new(loadings: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        if loadings.ncols() == 0 {
            return Err(Error::InvalidParameter("model needs at least one factor".into()));
        }
        if loadings.nrows() != psi.len() {
            return Err(Error::DimensionMismatch {
                expected: loadings.nrows(),
                found: psi.len(),
            });
        }
        if loadings.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("loadings must be finite".into()));
        }
        if let Some(i) = psi.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "unique variance {i} must be positive and finite, got {}",
                psi[i]
            )));
        }
        Ok(Self { loadings, psi })
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    pub fn n_vars(&self) -> usize {
        self.psi.len()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.loadings, self.psi)
    }

    /// Dense `ΛΛᵀ + Ψ`.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let mut sigma = &self.loadings * self.loadings.transpose();
        for i in 0..self.n_vars() {
            sigma[(i, i)] += self.psi[i];
        }
        sigma
    }

    /// Number of loadings that are exactly nonzero.
    pub fn nonzero_loadings(&self) -> usize {
        self.loadings.iter().filter(|&&v| v != 0.0).count()
    }

    /// Number of columns with at least one nonzero loading.
    pub fn active_factors(&self) -> usize {
        self.loadings
            .column_iter()
            .filter(|c| c.iter().any(|&v| v != 0.0))
            .count()
    }

    fn check_dims(&self, moments: &SampleMoments) -> Result<()> {
        if self.n_vars() != moments.n_vars() {
            return Err(Error::DimensionMismatch {
                expected: moments.n_vars(),
                found: self.n_vars(),
            });
        }
        Ok(())
    }
}

/// Decomposed value of the penalized log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenalizedObjectiveValue {
    pub loglik: f64,
    /// `N Σ_ij ρP(|λ_ij|; ψ_iρ)/ψ_i`
    pub penalty: f64,
    /// `(N/2) η Σ_i s_ii / ψ_i`
    pub eta_term: f64,
    pub total: f64,
}

impl PenalizedObjectiveValue {
    pub fn new(loglik: f64, penalty: f64, eta_term: f64) -> Self {
        Self {
            loglik,
            penalty,
            eta_term,
            total: loglik - penalty - eta_term,
        }
    }
}

/// Woodbury pieces shared by the likelihood, its gradient and the E-step.
pub(crate) struct Capacitance {
    /// `W = Ψ⁻¹Λ`
    pub w: DMatrix<f64>,
    /// `S W`
    pub sw: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
}

impl Capacitance {
    pub fn new(model: &FactorModel, moments: &SampleMoments) -> Result<Self> {
        model.check_dims(moments)?;
        let psi = model.psi();
        let (min_psi, max_psi) = psi
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let condition = (max_psi + model.loadings().norm_squared()) / min_psi;
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularModel { condition });
        }
        let mut w = model.loadings().clone();
        for (i, mut row) in w.row_iter_mut().enumerate() {
            row /= psi[i];
        }
        let m = model.n_factors();
        let cap = DMatrix::identity(m, m) + model.loadings().tr_mul(&w);
        let chol = Cholesky::new(cap).ok_or(Error::Numerical { min_psi })?;
        let sw = moments.cov_times(&w);
        Ok(Self { w, sw, chol })
    }

    pub fn log_det_m(&self) -> f64 {
        self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
    }

    pub fn m_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_likelihood(&self, model: &FactorModel, moments: &SampleMoments) -> f64 {
        let p = model.n_vars();
        let psi = model.psi();
        let log_det_psi: f64 = psi.iter().map(|v| v.ln()).sum();
        let diag_term: f64 = (0..p).map(|i| moments.var(i) / psi[i]).sum();
        // tr(M⁻¹ WᵀSW)
        let wsw = self.w.tr_mul(&self.sw);
        let correction = self.chol.solve(&wsw).trace();
        let n = moments.n_obs() as f64;
        -0.5 * n
            * (p as f64 * (2.0 * PI).ln() + log_det_psi + self.log_det_m() + diag_term
                - correction)
    }
}

/// Gaussian log-likelihood `ℓ(Λ, Ψ)`.
pub fn log_likelihood(model: &FactorModel, moments: &SampleMoments) -> Result<f64> {
    Ok(Capacitance::new(model, moments)?.log_likelihood(model, moments))
}

/// `∂ℓ/∂Λ = −N Σ⁻¹(Σ − S)Σ⁻¹Λ`.
pub fn loading_gradient(model: &FactorModel, moments: &SampleMoments) -> Result<DMatrix<f64>> {
    let cap = Capacitance::new(model, moments)?;
    let m_inv = cap.m_inverse();
    // Σ⁻¹Λ = W M⁻¹
    let g = &cap.w * &m_inv;
    let sg = &cap.sw * &m_inv;
    // Σ⁻¹ S G = Ψ⁻¹ SG − W M⁻¹ Wᵀ SG
    let mut sigma_inv_sg = &cap.w * (&m_inv * cap.w.tr_mul(&sg));
    sigma_inv_sg.neg_mut();
    for (i, mut row) in sigma_inv_sg.row_iter_mut().enumerate() {
        row += sg.row(i) / model.psi()[i];
    }
    Ok((g - sigma_inv_sg) * -(moments.n_obs() as f64))
}

/// `(N/2) η Σ_i s_ii / ψ_i`, the trace penalty against Heywood cases.
pub(crate) fn eta_term(model: &FactorModel, moments: &SampleMoments, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let tr: f64 = (0..model.n_vars())
        .map(|i| moments.var(i) / model.psi()[i])
        .sum();
    0.5 * moments.n_obs() as f64 * eta * tr
}

/// `N Σ_ij ρP(|λ_ij|; ψ_iρ; γ)/ψ_i` at penalty level `level` (already
/// calibrated); see [`PenaltySpec::row_value`].
pub(crate) fn penalty_term(
    model: &FactorModel,
    moments: &SampleMoments,
    spec: &PenaltySpec,
    level: f64,
) -> f64 {
    if level == 0.0 {
        return 0.0;
    }
    let l = model.loadings();
    let mut sum = 0.0;
    for j in 0..l.ncols() {
        for i in 0..l.nrows() {
            sum += spec.row_value(l[(i, j)], level, model.psi()[i]);
        }
    }
    moments.n_obs() as f64 * sum
}

/// Penalized log-likelihood `ℓ − NΣρP(|λ_ij|; ψ_iρ)/ψ_i − (N/2)η tr(Ψ^{-1/2}SΨ^{-1/2})`.
///
/// `rho` is on the lasso scale; for SCAD and MC+ it is mapped through
/// [`PenaltySpec::calibrated_rho`] before entering `P`.
pub fn penalized_objective(
    model: &FactorModel,
    moments: &SampleMoments,
    spec: &PenaltySpec,
    rho: f64,
    eta: f64,
) -> Result<PenalizedObjectiveValue> {
    if !(rho >= 0.0) || !(eta >= 0.0) {
        return Err(Error::InvalidParameter(
            "rho and eta must be nonnegative".into(),
        ));
    }
    let level = spec.calibrated_rho(rho)?;
    let loglik = log_likelihood(model, moments)?;
    Ok(PenalizedObjectiveValue::new(
        loglik,
        penalty_term(model, moments, spec, level),
        eta_term(model, moments, eta),
    ))
}

/// Posterior mean of the factors given one observation, `M⁻¹ΛᵀΨ⁻¹x`.
/// The reconstruction of `x` is `Λ · scores`.
pub fn posterior_scores(model: &FactorModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.n_vars() {
        return Err(Error::DimensionMismatch {
            expected: model.n_vars(),
            found: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("observation has non-finite values".into()));
    }
    let scaled = x.component_div(model.psi());
    let rhs = model.loadings().tr_mul(&scaled);
    let m = model.n_factors();
    let mut w = model.loadings().clone();
    for (i, mut row) in w.row_iter_mut().enumerate() {
        row /= model.psi()[i];
    }
    let cap = DMatrix::identity(m, m) + model.loadings().tr_mul(&w);
    let min_psi = model.psi().min();
    let chol = Cholesky::new(cap).ok_or(Error::Numerical { min_psi })?;
    Ok(chol.solve(&rhs))
}
