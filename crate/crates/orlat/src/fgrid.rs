//! Finite-d extinction profile `F_d(s)` by functional fixed-point iteration.
//!
//! `F_d(s)` is the extinction probability of the weighted branching process on
//! the d-ary oriented tree given root weight `s`. It satisfies
//!
//! ```text
//! F_d(s) = E_{Y₀~Exp(1)} [ ( E_ρ[ F_d(ρ)·(1 − e^{−λsρY₀/d}) + e^{−λsρY₀/d} ] )^d ],
//! ```
//!
//! and is the *minimal* fixed point of that monotone map, so iterating from
//! `F ≡ 0` converges upward to it. `F_d` is represented by piecewise-linear
//! interpolation on a uniform grid over `[0, M]`; the Lipschitz bound
//! `|F_d(s) − F_d(t)| ≤ λM|t − s|` keeps the interpolation error explicit.
//!
//! Two quadratures are involved. The outer `Exp(1)` expectation uses
//! Gauss–Laguerre with node doubling until the doubled rule moves `Φ(F)` by
//! less than a tenth of the stopping tolerance. The inner `ρ`-expectation is
//! evaluated in closed form: against atoms it is a finite sum, and against
//! uniform segments the integrals of `(hat function)·e^{−aρ}` over each grid
//! cell reduce to the stable primitives `j₀(t) = (1−e^{−t})/t` and
//! `j₁(t) = (1−(1+t)e^{−t})/t²`. The inner expectation is therefore an affine
//! function of the grid values with precomputable sparse coefficients, and one
//! iteration is a sparse matrix–vector product.

use crate::meanfield::{self, MeanFieldError};
use crate::quad;
use crate::weights::{WeightError, WeightSpec};
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_GRID_POINTS: usize = 129;
pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_ITERATIONS: u64 = 1_000_000;
const LAGUERRE_START: usize = 64;
const LAGUERRE_MAX: usize = 1024;
/// Slack for the pointwise monotone-iterate assertion (quadrature roundoff).
const MONOTONE_SLACK: f64 = 1e-12;
/// Cap on stored sparse coefficients (memory guard during node escalation).
const MAX_COEF_ENTRIES: usize = 64_000_000;

#[derive(Debug, Error)]
pub enum FgridError {
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("fixed-point iteration did not converge within {0} iterations")]
    NoConvergence(u64),
    #[error("s = {s} is outside the weight support [0, {bound}]")]
    OutOfSupport { s: f64, bound: f64 },
    #[error(transparent)]
    Subcritical(#[from] MeanFieldError),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

/// Converged extinction profile of the depth-d branching process.
#[derive(Debug, Clone)]
pub struct FGrid {
    pub d: u32,
    pub lambda: f64,
    /// Uniform grid on `[0, M]`.
    pub s_nodes: Vec<f64>,
    /// `F_d` at the grid nodes, non-increasing, in `[0, 1]`.
    pub values: Vec<f64>,
    pub iterations: u64,
    /// Sup-norm change of the final iteration.
    pub sup_residual: f64,
    /// Gauss–Laguerre node count that passed the doubling check.
    pub laguerre_nodes: usize,
    bound_m: f64,
    h_grid: f64,
}

impl FGrid {
    pub fn bound_m(&self) -> f64 {
        self.bound_m
    }

    pub fn h_grid(&self) -> f64 {
        self.h_grid
    }

    /// Largest adjacent-node slope magnitude of the stored profile.
    pub fn max_slope(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| (w[0] - w[1]).abs() / self.h_grid)
            .fold(0.0, f64::max)
    }

    fn eval_clamped(&self, s: f64) -> f64 {
        let (k, w) = interp_point(s, self.h_grid, self.s_nodes.len());
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

/// Piecewise-linear evaluation of the profile; exact at the nodes.
pub fn eval_f(grid: &FGrid, s: f64) -> Result<f64, FgridError> {
    if !s.is_finite() || s < 0.0 || s > grid.bound_m {
        return Err(FgridError::OutOfSupport {
            s,
            bound: grid.bound_m,
        });
    }
    Ok(grid.eval_clamped(s))
}

/// Survival probability of the depth-d process: `1 − E F_d(ρ)`.
///
/// The expectation of the piecewise-linear profile is evaluated exactly
/// (atoms by interpolation, segments by cellwise integration), so no
/// quadrature error enters beyond the solve itself.
pub fn branching_survival_d(grid: &FGrid, spec: &WeightSpec) -> f64 {
    let npts = grid.s_nodes.len();
    let mut acc = 0.0;
    for &(v, p) in spec.atoms() {
        acc += p * grid.eval_clamped(v);
    }
    for &(lo, hi, p) in spec.segments() {
        let dens = p / (hi - lo);
        for_each_panel(lo, hi, grid.h_grid, npts, |k, _a_lo, len, off| {
            // ∫ φ_{k+1} dr over the panel is (L²/2 + off·L)/h; φ_k gets the rest.
            let p1 = (0.5 * len * len + off * len) / grid.h_grid;
            let p0 = len - p1;
            acc += dens * (grid.values[k] * p0 + grid.values[k + 1] * p1);
        });
    }
    1.0 - acc
}

/// The d → ∞ profile `s ↦ 1/(1 + λsθ)` (requires a supercritical rate).
#[derive(Debug, Clone, Copy)]
pub struct LimitProfile {
    pub lambda: f64,
    pub theta: f64,
}

impl LimitProfile {
    pub fn eval(&self, s: f64) -> f64 {
        1.0 / (1.0 + self.lambda * s * self.theta)
    }
}

pub fn limit_profile(spec: &WeightSpec, lambda: f64) -> Result<LimitProfile, FgridError> {
    let sol = meanfield::solve_theta(spec, lambda)?;
    Ok(LimitProfile {
        lambda,
        theta: sol.theta,
    })
}

/// `(1 − e^{−t})/t`, continuous at 0.
fn j0(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        -f64::exp_m1(-t) / t
    }
}

/// `(1 − (1+t)e^{−t})/t²`, continuous at 0 (value 1/2).
///
/// For small t the direct form loses all significant digits, so a short
/// alternating series `Σ_{n≥2} (−1)^n (n−1) t^{n−2}/n!` takes over.
fn j1(t: f64) -> f64 {
    if t <= 0.1 {
        let mut acc = 0.0;
        let mut factorial = 1.0; // n! running over the loop
        let mut t_pow = 1.0; // t^{n−2}
        let mut sign = 1.0;
        for n in 2..=12u32 {
            factorial *= f64::from(n);
            acc += sign * f64::from(n - 1) * t_pow / factorial;
            t_pow *= t;
            sign = -sign;
        }
        acc
    } else {
        (1.0 - (1.0 + t) * (-t).exp()) / (t * t)
    }
}

/// Locate `s` on the uniform grid: cell index `k` and weight `w` on node `k+1`.
fn interp_point(s: f64, h: f64, npts: usize) -> (usize, f64) {
    let k = ((s / h).floor() as usize).min(npts - 2);
    let w = ((s - h * k as f64) / h).clamp(0.0, 1.0);
    (k, w)
}

/// Visit every (grid cell ∩ segment) panel: `f(cell k, panel start, panel
/// length, panel start − s_k)`.
fn for_each_panel<F: FnMut(usize, f64, f64, f64)>(lo: f64, hi: f64, h: f64, npts: usize, mut f: F) {
    let k_first = ((lo / h).floor() as usize).min(npts - 2);
    let k_last = ((hi / h).ceil() as usize).clamp(1, npts - 1) - 1;
    for k in k_first..=k_last {
        let s_k = h * k as f64;
        let a = lo.max(s_k);
        let b = hi.min(s_k + h);
        if b > a {
            f(k, a, b - a, a - s_k);
        }
    }
}

/// One Gauss–Laguerre level of the fixed-point map Φ, with the inner
/// ρ-expectation stored as sparse affine coefficients per (node, s-point) row.
struct PhiOperator {
    d: i32,
    lag: Arc<quad::GaussRule>,
    /// Per-row constant term of the inner expectation.
    alpha: Vec<f64>,
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    coefs: Vec<f64>,
}

impl PhiOperator {
    fn build(
        spec: &WeightSpec,
        lambda: f64,
        d: u32,
        s_nodes: &[f64],
        h: f64,
        n_lag: usize,
    ) -> Result<PhiOperator, FgridError> {
        let lag = quad::laguerre(n_lag);
        let npts = s_nodes.len();
        let cells_touched: usize = spec
            .segments()
            .iter()
            .map(|&(lo, hi, _)| ((hi - lo) / h).ceil() as usize + 2)
            .sum::<usize>()
            + spec.atoms().len();
        let projected = n_lag * npts * 2 * cells_touched.max(1);
        if projected > MAX_COEF_ENTRIES {
            return Err(FgridError::BadGrid(format!(
                "node escalation to {n_lag} Laguerre points needs ~{projected} coefficients; \
                 reduce the grid or the weight-law complexity"
            )));
        }
        let rows = n_lag * npts;
        let mut alpha = Vec::with_capacity(rows);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut cols = Vec::new();
        let mut coefs = Vec::new();
        row_ptr.push(0u32);
        let mut row_buf = vec![0.0f64; npts];
        let mut touched: Vec<usize> = Vec::with_capacity(2 * cells_touched + 2);
        for &y in &lag.nodes {
            for &s in s_nodes {
                let a = lambda * s * y / f64::from(d);
                let mut base = 0.0;
                for &(v, p) in spec.atoms() {
                    let decay = (-a * v).exp();
                    base += p * decay;
                    let c = p * -f64::exp_m1(-a * v);
                    if c != 0.0 {
                        let (k, w) = interp_point(v, h, npts);
                        if row_buf[k] == 0.0 && c * (1.0 - w) != 0.0 {
                            touched.push(k);
                        }
                        row_buf[k] += c * (1.0 - w);
                        if row_buf[k + 1] == 0.0 && c * w != 0.0 {
                            touched.push(k + 1);
                        }
                        row_buf[k + 1] += c * w;
                    }
                }
                for &(lo, hi, p) in spec.segments() {
                    let dens = p / (hi - lo);
                    for_each_panel(lo, hi, h, npts, |k, a_lo, len, off| {
                        let t = a * len;
                        let scale = (-a * a_lo).exp();
                        let e0 = scale * len * j0(t);
                        let e1 = scale * len * len * j1(t);
                        // Plain (a = 0) counterparts of the same integrals.
                        let p1 = (0.5 * len * len + off * len) / h;
                        let q1 = (e1 + off * e0) / h;
                        let c_hi = dens * (p1 - q1);
                        let c_lo = dens * ((len - p1) - (e0 - q1));
                        base += dens * e0;
                        if row_buf[k] == 0.0 && c_lo != 0.0 {
                            touched.push(k);
                        }
                        row_buf[k] += c_lo;
                        if row_buf[k + 1] == 0.0 && c_hi != 0.0 {
                            touched.push(k + 1);
                        }
                        row_buf[k + 1] += c_hi;
                    });
                }
                alpha.push(base);
                touched.sort_unstable();
                touched.dedup();
                for &k in &touched {
                    if row_buf[k] != 0.0 {
                        cols.push(k as u32);
                        coefs.push(row_buf[k]);
                        row_buf[k] = 0.0;
                    }
                }
                touched.clear();
                row_ptr.push(cols.len() as u32);
            }
        }
        Ok(PhiOperator {
            d: d as i32,
            lag,
            alpha,
            row_ptr,
            cols,
            coefs,
        })
    }

    /// `out[i] = Φ(F)(s_i)` for the piecewise-linear `F` with node values `v`.
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut row = 0usize;
        for &wq in &self.lag.weights {
            for slot in out.iter_mut() {
                let lo = self.row_ptr[row] as usize;
                let hi = self.row_ptr[row + 1] as usize;
                let mut inner = self.alpha[row];
                for (c, k) in self.coefs[lo..hi].iter().zip(&self.cols[lo..hi]) {
                    inner += c * v[*k as usize];
                }
                *slot += wq * inner.clamp(0.0, 1.0).powi(self.d);
                row += 1;
            }
        }
    }
}

/// Solve for the profile `F_d` on a uniform grid by monotone iteration from
/// `F ≡ 0`, escalating the Laguerre node count until a doubled rule moves
/// `Φ(F)` by less than `tol/10`.
pub fn solve_fgrid(
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    grid_points: usize,
    tol: f64,
) -> Result<FGrid, FgridError> {
    if d < 1 {
        return Err(FgridError::BadGrid("d must be at least 1".into()));
    }
    if grid_points < 33 {
        return Err(FgridError::BadGrid(format!(
            "grid_points = {grid_points} is below the minimum of 33"
        )));
    }
    if tol.is_nan() || tol < 1e-12 {
        return Err(FgridError::BadGrid(format!(
            "tol = {tol} is below the supported floor of 1e-12"
        )));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(FgridError::BadGrid(format!("lambda = {lambda} is invalid")));
    }
    let m = spec.bound_m();
    let h = m / (grid_points - 1) as f64;
    let s_nodes: Vec<f64> = (0..grid_points).map(|i| h * i as f64).collect();

    let mut n_lag = LAGUERRE_START;
    let mut op = PhiOperator::build(spec, lambda, d, &s_nodes, h, n_lag)?;
    let mut v = vec![0.0f64; grid_points];
    let mut next = vec![0.0f64; grid_points];
    let mut iterations: u64 = 0;
    let mut sup_residual;
    loop {
        // Iterate to a fixed point at the current node count.
        loop {
            if iterations >= MAX_ITERATIONS {
                return Err(FgridError::NoConvergence(iterations));
            }
            op.apply(&v, &mut next);
            iterations += 1;
            let mut sup = 0.0f64;
            for (n, o) in next.iter().zip(&v) {
                assert!(
                    *n >= *o - MONOTONE_SLACK,
                    "monotone iteration violated: {n} < {o}"
                );
                sup = sup.max((n - o).abs());
            }
            std::mem::swap(&mut v, &mut next);
            if sup <= tol {
                sup_residual = sup;
                break;
            }
        }
        // Node-doubling stability check on the converged profile.
        if n_lag >= LAGUERRE_MAX {
            break;
        }
        let op2 = PhiOperator::build(spec, lambda, d, &s_nodes, h, 2 * n_lag)?;
        let mut w1 = vec![0.0f64; grid_points];
        let mut w2 = vec![0.0f64; grid_points];
        op.apply(&v, &mut w1);
        op2.apply(&v, &mut w2);
        let change = w1
            .iter()
            .zip(&w2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change < tol / 10.0 {
            break;
        }
        n_lag *= 2;
        op = op2;
    }

    // s = 0 gives rate-0 clocks: F(0) = 1 exactly; quadrature mass roundoff
    // may leave it at 1 − O(1e−16).
    v[0] = 1.0;
    // Enforce the monotone-in-s shape against sub-tolerance quadrature noise.
    for i in 1..v.len() {
        v[i] = v[i].clamp(0.0, 1.0).min(v[i - 1]);
    }
    Ok(FGrid {
        d,
        lambda,
        s_nodes,
        values: v,
        iterations,
        sup_residual,
        laguerre_nodes: n_lag,
        bound_m: m,
        h_grid: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn j_helpers_match_reference() {
        assert_eq!(j0(0.0), 1.0);
        assert!((j0(1e-9) - (1.0 - 0.5e-9)).abs() < 1e-12);
        assert!((j0(2.0) - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-15);
        assert!((j1(0.0) - 0.5).abs() < 1e-15);
        // Series and direct forms agree around the crossover.
        for t in [0.05f64, 0.0999, 0.1001, 0.3] {
            let direct = (1.0 - (1.0 + t) * (-t).exp()) / (t * t);
            assert!((j1(t) - direct).abs() < 1e-11, "t = {t}");
        }
    }

    #[test]
    fn exp_moment_identity() {
        // E e^{−aY₀} = 1/(1+a) for Y₀ ~ Exp(1), the identity behind the
        // closed-form limit profile check.
        let rule = quad::laguerre(64);
        for a in [0.1, 1.0, 10.0] {
            let got = rule.apply(|y| (-a * y).exp());
            assert!((got - 1.0 / (1.0 + a)).abs() < 1e-10, "a = {a}");
        }
    }

    #[test]
    fn profile_starts_at_one_and_detects_subcriticality() {
        let spec = WeightSpec::constant(1.0).unwrap();
        let grid = solve_fgrid(&spec, 0.5, 5, 65, 1e-10).unwrap();
        assert_eq!(grid.values[0], 1.0);
        // Subcritical: extinction is certain for every root weight.
        assert!(grid.values.iter().all(|&v| v > 1.0 - 1e-8));
        assert!(branching_survival_d(&grid, &spec).abs() < 1e-8);
    }

    #[test]
    fn eval_is_exact_at_nodes_and_rejects_outside() {
        let spec = WeightSpec::constant(1.0).unwrap();
        let grid = solve_fgrid(&spec, 2.0, 5, 65, 1e-10).unwrap();
        for (i, &s) in grid.s_nodes.iter().enumerate() {
            assert_eq!(eval_f(&grid, s).unwrap(), grid.values[i]);
        }
        let mid = 0.5 * (grid.s_nodes[3] + grid.s_nodes[4]);
        let v = eval_f(&grid, mid).unwrap();
        assert!(v <= grid.values[3] && v >= grid.values[4]);
        assert!(matches!(
            eval_f(&grid, 1.1),
            Err(FgridError::OutOfSupport { .. })
        ));
        assert!(matches!(
            eval_f(&grid, -0.1),
            Err(FgridError::OutOfSupport { .. })
        ));
    }

    #[test]
    fn bad_grid_arguments_are_rejected() {
        let spec = WeightSpec::constant(1.0).unwrap();
        assert!(matches!(
            solve_fgrid(&spec, 2.0, 5, 16, 1e-10),
            Err(FgridError::BadGrid(_))
        ));
        assert!(matches!(
            solve_fgrid(&spec, 2.0, 5, 65, 1e-13),
            Err(FgridError::BadGrid(_))
        ));
    }

    #[test]
    fn limit_profile_closed_form() {
        let spec = WeightSpec::constant(1.0).unwrap();
        let prof = limit_profile(&spec, 2.0).unwrap();
        assert!((prof.eval(0.0) - 1.0).abs() < 1e-15);
        assert!((prof.eval(1.0) - 0.5).abs() < 1e-10);
        let mut prev = prof.eval(0.0);
        for i in 1..=10 {
            let cur = prof.eval(i as f64 / 10.0);
            assert!(cur < prev);
            prev = cur;
        }
    }
}
