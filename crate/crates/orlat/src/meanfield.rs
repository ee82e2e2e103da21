//! Mean-field (d → ∞) fixed point for the survival probability.
//!
//! For an infection rate λ above the critical value `1/E(ρ²)`, the limiting
//! survival probability is governed by the unique θ > 0 solving
//!
//! ```text
//! E[ λρ² / (1 + λρθ) ] = 1,
//! ```
//!
//! and equals `E[ λρθ / (1 + λρθ) ]`. The left side is strictly decreasing in
//! θ, starts at `λE(ρ²) > 1`, and tends to 0, so bisection on a doubled
//! bracket finds the root robustly; no derivative information is needed.

use crate::weights::{WeightError, WeightSpec};
use serde::Serialize;
use thiserror::Error;

/// Residual target for the fixed-point equation.
const RESIDUAL_TOL: f64 = 1e-12;
/// Relative bracket-width floor that terminates bisection regardless of residual.
const WIDTH_FLOOR: f64 = 1e-15;
/// Maximum number of bracket doublings before giving up.
const MAX_DOUBLINGS: u32 = 64;

#[derive(Debug, Error)]
pub enum MeanFieldError {
    /// λ ≤ 1/E(ρ²): the fixed-point equation has no positive solution and the
    /// limiting survival probability is 0.
    #[error(
        "rate {lambda} is not above the critical rate {critical}; no positive fixed point exists"
    )]
    SubcriticalRate { lambda: f64, critical: f64 },
    /// No upper bracket with g(θ) < 1 was found (not reachable for valid specs).
    #[error("failed to bracket the fixed point after {MAX_DOUBLINGS} doublings")]
    BracketFailure,
    #[error(transparent)]
    Weight(#[from] WeightError),
}

/// The solved mean-field fixed point at one rate λ.
#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldSolution {
    pub lambda: f64,
    /// Unique positive root of `E(λρ²/(1+λρθ)) = 1`.
    pub theta: f64,
    /// `E(λρθ/(1+λρθ))`, the d → ∞ survival probability.
    pub limit_survival: f64,
    /// `|E(λρ²/(1+λρθ)) − 1|` at the returned θ.
    pub residual: f64,
}

/// The critical infection rate `1/E(ρ²)`.
pub fn critical_rate(spec: &WeightSpec) -> f64 {
    1.0 / spec.second_moment()
}

/// `g(θ) = E(λρ²/(1+λρθ))`, the function whose root at 1 defines θ.
fn g(spec: &WeightSpec, lambda: f64, theta: f64) -> Result<f64, WeightError> {
    spec.expect(|r| lambda * r * r / (1.0 + lambda * r * theta))
}

/// Solve the fixed-point equation for θ at rate `lambda`.
pub fn solve_theta(spec: &WeightSpec, lambda: f64) -> Result<MeanFieldSolution, MeanFieldError> {
    let critical = critical_rate(spec);
    if lambda <= critical {
        return Err(MeanFieldError::SubcriticalRate { lambda, critical });
    }
    // Bracket: g(0) = λE(ρ²) > 1; double until g(hi) < 1.
    let mut hi = 1.0;
    let mut doublings = 0;
    while g(spec, lambda, hi)? >= 1.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(MeanFieldError::BracketFailure);
        }
    }
    let mut lo = 0.0;
    let mut mid = 0.5 * hi;
    let mut residual = f64::INFINITY;
    while hi - lo > WIDTH_FLOOR * hi.max(1.0) {
        mid = 0.5 * (lo + hi);
        let gm = g(spec, lambda, mid)?;
        residual = (gm - 1.0).abs();
        if residual <= RESIDUAL_TOL {
            break;
        }
        if gm > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = mid;
    let limit_survival = spec.expect(|r| lambda * r * theta / (1.0 + lambda * r * theta))?;
    Ok(MeanFieldSolution {
        lambda,
        theta,
        limit_survival,
        residual,
    })
}

/// The limiting survival probability `E(λρθ/(1+λρθ))` at rate `lambda`.
pub fn survival_limit(spec: &WeightSpec, lambda: f64) -> Result<f64, MeanFieldError> {
    Ok(solve_theta(spec, lambda)?.limit_survival)
}
