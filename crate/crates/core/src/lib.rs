//! Sparse factor analysis by nonconvex penalized maximum likelihood.
//!
//! The crate fits the Gaussian factor model `x ~ N(μ, ΛΛᵀ + Ψ)` with a lasso,
//! SCAD or MC+ penalty on the loadings, using EM with coordinate descent in
//! the M-step, and traces whole solution paths over the regularization
//! parameter `ρ` and the concavity `γ`. It also carries the two-step
//! baseline (maximum likelihood followed by orthogonal rotation) and the
//! pieces of a Monte Carlo study harness.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
mod linalg;
pub mod model;
pub mod path;
pub mod penalty;
pub mod rotation;
pub mod selection;
pub mod simulation;
pub mod solver;

pub use error::{Error, Result};
pub use model::{
    log_likelihood, loading_gradient, penalized_objective, posterior_scores, sample_covariance,
    FactorModel, PenalizedObjectiveValue, SampleMoments,
};
pub use penalty::{penalty_value, reparameterize_rho, threshold, PenaltyFamily, PenaltySpec};
pub use solver::{
    coordinate_update, e_step, fit, m_step, EStepCache, FitResult, FitWarning, SolverOptions,
};
pub use path::{
    build_grid, compute_path, fit_path, init_loadings, maybe_expand_factors, select_rho_max,
    PathCell, PathGrid, PathOptions, PathResult,
};
pub use selection::{criteria, degrees_of_freedom, select, Criterion, CriterionSet};
pub use rotation::{ml_fit, rotate, two_step, RotationCriterion, RotationResult};
pub use simulation::{
    align, generate, model_a, model_b, run_replication, run_study, summarize, StudyConfig,
    StudyMetrics, StudyReport, TrueModel,
};
