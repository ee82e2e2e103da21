//! Contract tests for the mean-field fixed point θ(λ) and the limiting
//! survival probability.

use orlat::meanfield::{critical_rate, solve_theta, MeanFieldError};
use orlat::weights::WeightSpec;

/// For ρ ≡ 1 the fixed-point equation λ/(1+λθ) = 1 has the closed-form
/// solution θ = (λ−1)/λ, which also equals the limiting survival probability.
#[test]
fn unit_weights_have_closed_form_theta() {
    let spec = WeightSpec::constant(1.0).unwrap();
    for lambda in [1.1, 2.0, 5.0] {
        let sol = solve_theta(&spec, lambda).unwrap();
        let expected = (lambda - 1.0) / lambda;
        assert!(
            (sol.theta - expected).abs() < 1e-10,
            "theta({lambda}) = {} vs {expected}",
            sol.theta
        );
        assert!(
            (sol.limit_survival - expected).abs() < 1e-10,
            "survival({lambda}) = {} vs {expected}",
            sol.limit_survival
        );
        assert!(sol.residual < 1e-12);
    }
}

/// Frozen reference for the uniform(0,1) law at λ = 5: the root of
/// E(λρ²/(1+λρθ)) = 1, located independently with high-precision adaptive
/// quadrature and bisection to 1e−15.
#[test]
fn uniform_law_matches_frozen_reference() {
    let spec = WeightSpec::uniform(0.0, 1.0).unwrap();
    let sol = solve_theta(&spec, 5.0).unwrap();
    assert!(
        (sol.theta - 0.18336027658877808).abs() < 1e-9,
        "theta = {}",
        sol.theta
    );
    assert!(
        (sol.limit_survival - 0.2902957363183792).abs() < 1e-9,
        "survival = {}",
        sol.limit_survival
    );
}

/// The critical rate is 1/E(ρ²): 3 for uniform(0,1), 1/E(ρ²) exactly for a
/// two-atom law.
#[test]
fn critical_rate_is_reciprocal_second_moment() {
    let uniform = WeightSpec::uniform(0.0, 1.0).unwrap();
    assert!((critical_rate(&uniform) - 3.0).abs() < 1e-9);

    let atoms = WeightSpec::from_atoms(&[(0.5, 0.5), (1.5, 0.5)]).unwrap();
    let second = 0.5 * 0.25 + 0.5 * 2.25;
    assert!((critical_rate(&atoms) - 1.0 / second).abs() < 1e-12);
}

/// θ(λ) is strictly increasing in λ and every solve meets the residual
/// contract.
#[test]
fn theta_increases_with_the_rate() {
    let spec = WeightSpec::uniform(0.0, 1.0).unwrap();
    let mut last = 0.0;
    for k in 0..12 {
        let lambda = 3.5 + 0.75 * f64::from(k);
        let sol = solve_theta(&spec, lambda).unwrap();
        assert!(
            sol.theta > last,
            "theta({lambda}) = {} did not increase past {last}",
            sol.theta
        );
        assert!(
            sol.residual <= 1e-12,
            "residual {} at {lambda}",
            sol.residual
        );
        last = sol.theta;
    }
}

/// The returned θ satisfies the fixed-point equation when re-evaluated with
/// plain atom sums, independently of the solver's own quadrature.
#[test]
fn solution_satisfies_the_fixed_point_equation_for_atom_laws() {
    let atoms = [(0.5, 0.5), (1.5, 0.5)];
    let spec = WeightSpec::from_atoms(&atoms).unwrap();
    let lambda = 2.0;
    let sol = solve_theta(&spec, lambda).unwrap();
    let g: f64 = atoms
        .iter()
        .map(|&(r, p)| p * lambda * r * r / (1.0 + lambda * r * sol.theta))
        .sum();
    assert!(
        (g - 1.0).abs() < 1e-10,
        "fixed-point residual {}",
        (g - 1.0).abs()
    );
    let survival: f64 = atoms
        .iter()
        .map(|&(r, p)| p * lambda * r * sol.theta / (1.0 + lambda * r * sol.theta))
        .sum();
    assert!((sol.limit_survival - survival).abs() < 1e-10);
}

/// At or below the critical rate there is no positive fixed point.
#[test]
fn subcritical_and_critical_rates_are_rejected() {
    let spec = WeightSpec::uniform(0.0, 1.0).unwrap();
    for lambda in [0.5, 2.9] {
        match solve_theta(&spec, lambda) {
            Err(MeanFieldError::SubcriticalRate { .. }) => {}
            other => panic!("expected a subcritical error at {lambda}, got {other:?}"),
        }
    }
    let unit = WeightSpec::constant(1.0).unwrap();
    assert!(matches!(
        solve_theta(&unit, 1.0),
        Err(MeanFieldError::SubcriticalRate { .. })
    ));
}
