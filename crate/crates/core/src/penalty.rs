//! Penalty families, their scalar thresholding rules, and the
//! degrees-of-freedom calibration that maps a lasso-scale `ρ` to the level
//! used by a concave member of the family.

use alloc::format;

// Only needed when std is absent from the dependency graph.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Smallest admissible MC+ concavity; `γ ≤ 1 + MCP_GAMMA_EPS` is rejected.
pub const MCP_GAMMA_EPS: f64 = 1e-8;

/// Concavity substituted for a requested hard-threshold MC+ penalty.
pub const MCP_HARD_GAMMA: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyFamily {
    Lasso,
    Scad,
    Mcp,
}

impl PenaltyFamily {
    /// Lower end used when building concavity grids.
    pub fn gamma_min(self) -> f64 {
        match self {
            PenaltyFamily::Lasso => f64::INFINITY,
            PenaltyFamily::Scad => 2.01,
            PenaltyFamily::Mcp => 1.01,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PenaltyFamily::Lasso => "lasso",
            PenaltyFamily::Scad => "scad",
            PenaltyFamily::Mcp => "mcp",
        }
    }
}

impl core::str::FromStr for PenaltyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lasso" | "l1" => Ok(PenaltyFamily::Lasso),
            "scad" => Ok(PenaltyFamily::Scad),
            "mcp" | "mc+" => Ok(PenaltyFamily::Mcp),
            other => Err(Error::InvalidParameter(format!("unknown penalty family `{other}`"))),
        }
    }
}

/// A penalty family with its concavity `γ`. `γ = ∞` is the lasso member of
/// every family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec {
    family: PenaltyFamily,
    gamma: f64,
}

impl PenaltySpec {
    pub fn new(family: PenaltyFamily, gamma: f64) -> Result<Self> {
        let gamma = if family == PenaltyFamily::Lasso {
            f64::INFINITY
        } else {
            gamma
        };
        let ok = match family {
            PenaltyFamily::Lasso => true,
            PenaltyFamily::Scad => gamma > 2.0,
            PenaltyFamily::Mcp => gamma > 1.0 + MCP_GAMMA_EPS,
        };
        if !ok || gamma.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "gamma = {gamma} is outside the valid range for {}",
                family.name()
            )));
        }
        Ok(Self { family, gamma })
    }

    pub fn lasso() -> Self {
        Self {
            family: PenaltyFamily::Lasso,
            gamma: f64::INFINITY,
        }
    }

    pub fn scad(gamma: f64) -> Result<Self> {
        Self::new(PenaltyFamily::Scad, gamma)
    }

    pub fn mcp(gamma: f64) -> Result<Self> {
        Self::new(PenaltyFamily::Mcp, gamma)
    }

    pub fn family(&self) -> PenaltyFamily {
        self.family
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same family at another concavity.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.family, gamma)
    }

    /// True when the member behaves as the lasso.
    pub fn is_lasso(&self) -> bool {
        self.family == PenaltyFamily::Lasso || self.gamma.is_infinite()
    }

    /// Penalty level used inside `P` for a lasso-scale `rho`.
    pub fn calibrated_rho(&self, rho: f64) -> Result<f64> {
        if self.is_lasso() {
            Ok(rho)
        } else {
            reparameterize_rho(rho, self.gamma)
        }
    }

    /// `ρP(|θ|; ρ; γ)`.
    pub fn value(&self, theta: f64, rho: f64) -> Result<f64> {
        if !(rho >= 0.0) {
            return Err(Error::InvalidParameter(format!("rho must be nonnegative, got {rho}")));
        }
        Ok(self.value_unchecked(theta, rho))
    }

    pub(crate) fn value_unchecked(&self, theta: f64, rho: f64) -> f64 {
        let t = theta.abs();
        let g = self.gamma;
        if self.is_lasso() {
            return rho * t;
        }
        match self.family {
            PenaltyFamily::Lasso => rho * t,
            PenaltyFamily::Mcp => {
                if t < rho * g {
                    rho * (t - t * t / (2.0 * rho * g))
                } else {
                    0.5 * rho * rho * g
                }
            }
            PenaltyFamily::Scad => {
                if t <= rho {
                    rho * t
                } else if t <= g * rho {
                    (2.0 * g * rho * t - t * t - rho * rho) / (2.0 * (g - 1.0))
                } else {
                    0.5 * rho * rho * (g + 1.0)
                }
            }
        }
    }

    /// Penalty of a loading in a row with unique variance `psi`:
    /// `ρP(|θ|; ψρ; γ) / ψ`. The concave region then scales with `ψ`, so the
    /// coordinate step sees the family's nominal `γ`. For the lasso this is
    /// `ρ|θ|` whatever `ψ` is.
    pub fn row_value(&self, theta: f64, rho: f64, psi: f64) -> f64 {
        if self.is_lasso() {
            rho * theta.abs()
        } else {
            self.value_unchecked(theta, psi * rho) / psi
        }
    }

    /// `argmin_θ ½(θ − θ̃)² + ρ*P(|θ|)` by the family's closed form.
    pub fn threshold(&self, theta_tilde: f64, rho_star: f64) -> Result<f64> {
        if !(rho_star > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold level must be positive, got {rho_star}"
            )));
        }
        Ok(self.threshold_unchecked(theta_tilde, rho_star))
    }

    fn threshold_unchecked(&self, theta_tilde: f64, rho: f64) -> f64 {
        let t = theta_tilde.abs();
        let g = self.gamma;
        let magnitude = if self.is_lasso() {
            soft(t, rho)
        } else {
            match self.family {
                PenaltyFamily::Lasso => soft(t, rho),
                PenaltyFamily::Scad => {
                    if t <= 2.0 * rho {
                        soft(t, rho)
                    } else if t <= rho * g {
                        ((g - 1.0) * t - rho * g) / (g - 2.0)
                    } else {
                        t
                    }
                }
                PenaltyFamily::Mcp => {
                    if t <= rho * g {
                        soft(t, rho) / (1.0 - 1.0 / g)
                    } else {
                        t
                    }
                }
            }
        };
        with_sign(magnitude, theta_tilde)
    }

    /// `argmin_θ ½(θ − θ̃)² + w·ρP(|θ|; ρ; γ)` for a weight `w > 0`.
    ///
    /// With `w = 1` this is [`threshold`](Self::threshold). Other weights
    /// arise in the coordinate step, where `w = ψ_i / a_jj`; the scaled
    /// problem can be nonconvex, so every quadratic piece is minimized
    /// separately and the smallest objective wins (ties go to the smaller
    /// magnitude).
    pub fn weighted_threshold(&self, theta_tilde: f64, rho: f64, weight: f64) -> f64 {
        if rho == 0.0 {
            return theta_tilde;
        }
        if weight == 1.0 {
            return self.threshold_unchecked(theta_tilde, rho);
        }
        let t = theta_tilde.abs();
        let g = self.gamma;
        let wr = weight * rho;
        if self.is_lasso() || self.family == PenaltyFamily::Lasso {
            return with_sign(soft(t, wr), theta_tilde);
        }
        // (lo, hi, quadratic coefficient, linear coefficient) of ½x² − tx + w·pen(x)
        let mut pieces = [(0.0, 0.0, 0.0, 0.0); 3];
        let n = match self.family {
            PenaltyFamily::Mcp => {
                pieces[0] = (0.0, rho * g, 0.5 - weight / (2.0 * g), wr - t);
                pieces[1] = (rho * g, f64::INFINITY, 0.5, -t);
                2
            }
            PenaltyFamily::Scad => {
                pieces[0] = (0.0, rho, 0.5, wr - t);
                pieces[1] = (
                    rho,
                    g * rho,
                    0.5 - weight / (2.0 * (g - 1.0)),
                    wr * g / (g - 1.0) - t,
                );
                pieces[2] = (g * rho, f64::INFINITY, 0.5, -t);
                3
            }
            PenaltyFamily::Lasso => unreachable!(),
        };
        let objective = |x: f64| 0.5 * (x - t) * (x - t) + weight * self.value_unchecked(x, rho);
        let mut best_x = 0.0;
        let mut best_f = objective(0.0);
        let mut consider = |x: f64| {
            let f = objective(x);
            if f < best_f || (f == best_f && x < best_x) {
                best_x = x;
                best_f = f;
            }
        };
        for &(lo, hi, a, b) in &pieces[..n] {
            consider(lo);
            if hi.is_finite() {
                consider(hi);
            }
            if a > 0.0 {
                let v = (-b / (2.0 * a)).max(lo).min(hi);
                consider(v);
            }
        }
        with_sign(best_x, theta_tilde)
    }
}

fn soft(t: f64, rho: f64) -> f64 {
    if t <= rho {
        0.0
    } else {
        t - rho
    }
}

/// Applies the sign of `reference`; zero stays `+0.0`.
fn with_sign(magnitude: f64, reference: f64) -> f64 {
    if magnitude == 0.0 {
        0.0
    } else if reference < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// `ρP(|θ|; ρ; γ)`.
pub fn penalty_value(spec: &PenaltySpec, theta: f64, rho: f64) -> Result<f64> {
    spec.value(theta, rho)
}

/// Closed-form minimizer of `½(θ − θ̃)² + ρ*P(|θ|)`.
pub fn threshold(spec: &PenaltySpec, theta_tilde: f64, rho_star: f64) -> Result<f64> {
    spec.threshold(theta_tilde, rho_star)
}

/// Upper tail of the standard normal distribution.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / core::f64::consts::SQRT_2)
}

/// `ln Q(x)`, switching to the asymptotic tail series where `erfc` underflows.
fn log_normal_sf(x: f64) -> f64 {
    if x < 30.0 {
        return normal_sf(x).ln();
    }
    let z = 1.0 / (x * x);
    let series = 1.0 - z * (1.0 - z * (3.0 - z * (15.0 - 105.0 * z)));
    -0.5 * x * x - x.ln() - 0.5 * (2.0 * core::f64::consts::PI).ln() + series.ln()
}

/// Degrees-of-freedom calibration of the concave penalty level.
///
/// Returns the `ρ*` at which the univariate concave thresholding rule with
/// concavity `gamma` has the same null degrees of freedom as soft
/// thresholding at `rho`:
///
/// ```text
/// Φ(γρ*) − γΦ(ρ*) = −(γ − 1)Φ(ρ)
/// ```
///
/// with `Φ` the standard normal CDF. The root satisfies `ρ* ≥ ρ` and grows as
/// `γ` decreases. It is located by bisection to absolute tolerance `1e-10`,
/// starting from the bracket `[ρ, 50ργ/(γ−1)]` and doubling the upper end
/// while the residual has not changed sign.
pub fn reparameterize_rho(rho: f64, gamma: f64) -> Result<f64> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter(format!("rho must be finite and nonnegative, got {rho}")));
    }
    if gamma.is_infinite() && gamma > 0.0 {
        return Ok(rho);
    }
    if !(gamma > 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must exceed 1, got {gamma}")));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    // γQ(x) − Q(γx) − (γ−1)Q(ρ) in log form, decreasing in x.
    let target = (gamma - 1.0).ln() + log_normal_sf(rho);
    let residual = |x: f64| {
        let lq = log_normal_sf(x);
        let ratio = (log_normal_sf(gamma * x) - lq).exp();
        lq + (gamma - ratio).ln() - target
    };
    let mut lo = rho;
    let mut hi = 50.0 * rho * gamma / (gamma - 1.0);
    if !(residual(lo) > 0.0) {
        return Err(Error::Calibration { rho, gamma });
    }
    let cap = 1e3 * (1.0 + rho);
    while residual(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > cap {
            return Err(Error::Calibration { rho, gamma });
        }
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
