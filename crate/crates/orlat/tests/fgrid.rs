//! Contract tests for the extinction-profile iteration, checked against
//! independently computed reference values (high-precision fixed-point
//! solves of the d-fold recursion for the constant law, where the profile
//! expectation collapses to a scalar equation per grid node).

use orlat::fgrid::{branching_survival_d, eval_f, limit_profile, solve_fgrid, FgridError};
use orlat::weights::WeightSpec;

fn constant() -> WeightSpec {
    WeightSpec::constant(1.0).unwrap()
}

/// For ρ ≡ 1 the iteration closes over the single value F(1):
/// F(1) = E_Y[(F(1)(1 − e^{−λY/d}) + e^{−λY/d})^d], solvable to high
/// precision by scalar fixed-point iteration with exact Exp(1) moments.
#[test]
fn constant_law_extinction_values_match_reference() {
    let cases = [
        (2.0, 3, 0.686491673103708),
        (2.0, 5, 0.576820904025523),
        (4.0, 5, 0.268045919787801),
        (2.0, 10, 0.530348970555991),
        (2.0, 100, 0.502544576952763),
    ];
    for (lambda, d, expected) in cases {
        let grid = solve_fgrid(&constant(), lambda, d, 129, 1e-10).unwrap();
        let got = eval_f(&grid, 1.0).unwrap();
        assert!(
            (got - expected).abs() < 5e-9,
            "F_{d}(1) at lambda={lambda}: got {got}, want {expected}"
        );
    }
}

#[test]
fn constant_law_profile_matches_reference_at_interior_points() {
    // Same scalar recursion evaluated at s ∈ {1/4, 1/2, 3/4}; for a constant
    // law the grid carries no interpolation error at these points because the
    // ρ-expectation is a point evaluation.
    let grid = solve_fgrid(&constant(), 2.0, 5, 129, 1e-10).unwrap();
    let cases = [
        (0.25, 0.832285191215884),
        (0.5, 0.720313258612728),
        (0.75, 0.639028242683253),
    ];
    for (s, expected) in cases {
        let got = eval_f(&grid, s).unwrap();
        assert!(
            (got - expected).abs() < 5e-9,
            "F_5({s}): got {got}, want {expected}"
        );
    }
}

#[test]
fn profile_is_one_at_zero_and_nonincreasing() {
    for (lambda, d) in [(2.0, 5), (3.0, 8), (1.5, 20)] {
        let grid = solve_fgrid(&constant(), lambda, d, 129, 1e-10).unwrap();
        assert_eq!(eval_f(&grid, 0.0).unwrap(), 1.0);
        let values = &grid.values;
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "profile must not increase");
        }
        assert!(values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn profile_respects_the_lipschitz_bound() {
    // |F(s) − F(t)| ≤ λ·M·|s − t| up to the grid-resolution slack.
    let uniform = WeightSpec::uniform(0.25, 1.25).unwrap();
    for (lambda, d, pts) in [(2.0, 5, 129), (3.0, 12, 200), (5.0, 30, 129)] {
        let grid = solve_fgrid(&uniform, lambda, d, pts, 1e-9).unwrap();
        let h = grid.h_grid();
        let m = 1.25;
        assert!(
            grid.max_slope() <= lambda * m + 10.0 * h,
            "slope bound violated at lambda={lambda}, d={d}"
        );
    }
}

#[test]
fn large_dimension_approaches_the_meanfield_profile() {
    // sup_s |F_d(s) − 1/(1+λθs)| shrinks as d grows.
    let spec = constant();
    let limit = limit_profile(&spec, 2.0).unwrap();
    let mut previous = f64::INFINITY;
    for d in [10, 50, 200] {
        let grid = solve_fgrid(&spec, 2.0, d, 129, 1e-10).unwrap();
        let sup = grid
            .s_nodes
            .iter()
            .zip(&grid.values)
            .map(|(&s, &v)| (v - limit.eval(s)).abs())
            .fold(0.0f64, f64::max);
        assert!(
            sup < previous,
            "gap did not shrink at d={d}: {sup} vs {previous}"
        );
        previous = sup;
    }
    assert!(previous < 0.01, "gap at d=200 should be below 1%");
}

#[test]
fn subcritical_rates_converge_to_certain_extinction() {
    // Mean offspring below one forces F ≡ 1; the solver reaches it rather
    // than erroring. The closed-form limit profile, by contrast, needs a
    // supercritical rate for θ to exist.
    let grid = solve_fgrid(&constant(), 0.5, 5, 129, 1e-10).unwrap();
    let f1 = eval_f(&grid, 1.0).unwrap();
    assert!((f1 - 1.0).abs() < 1e-8, "F(1) = {f1} should be 1");
    assert!(limit_profile(&constant(), 0.5).is_err());
}

#[test]
fn degenerate_grids_are_rejected() {
    assert!(matches!(
        solve_fgrid(&constant(), 2.0, 5, 8, 1e-10),
        Err(FgridError::BadGrid(_))
    ));
    assert!(matches!(
        solve_fgrid(&constant(), 2.0, 0, 129, 1e-10),
        Err(FgridError::BadGrid(_))
    ));
}

#[test]
fn branching_oracle_agrees_with_the_profile_at_the_mean_weight() {
    // For the constant law the annealed root weight is ρ = 1, so the
    // extinction probability of the branching process from one root is
    // exactly F_d(1).
    let grid = solve_fgrid(&constant(), 2.0, 5, 129, 1e-10).unwrap();
    let ext = branching_survival_d(&grid, &constant());
    let f1 = eval_f(&grid, 1.0).unwrap();
    assert!(
        (ext - (1.0 - f1)).abs() < 1e-12,
        "survival {ext} vs 1 - F(1) {}",
        1.0 - f1
    );
}
