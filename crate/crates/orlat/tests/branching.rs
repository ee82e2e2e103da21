//! Contract tests for the branching-process engine against the deterministic
//! fixed-point oracle.

use orlat::branching::{
    estimate_branching_survival, run_branching, tally_fates, Fate, RootWeight, SurvivalReason,
};
use orlat::fgrid::{branching_survival_d, solve_fgrid};
use orlat::harness::replica_rng;
use orlat::weights::WeightSpec;

/// Monte Carlo survival agrees with the exact fixed-point value: the 99%
/// interval from 10 000 replicas covers the deterministic answer for ρ ≡ 1
/// and for a two-atom law. A population of 20 000 is an adequate survival
/// proxy here: the conditional extinction probability after reaching it is
/// below any representable tolerance.
#[test]
fn monte_carlo_agrees_with_the_fixed_point_oracle() {
    let cells = [
        (WeightSpec::constant(1.0).unwrap(), 2.0, 3u32),
        (
            WeightSpec::from_atoms(&[(0.5, 0.5), (1.5, 0.5)]).unwrap(),
            2.0,
            6u32,
        ),
    ];
    for (spec, lambda, d) in cells {
        let grid = solve_fgrid(&spec, lambda, d, 257, 1e-10).unwrap();
        let exact = branching_survival_d(&grid, &spec);
        let (est, _) = estimate_branching_survival(
            &spec,
            lambda,
            d,
            RootWeight::Sampled,
            200,
            20_000,
            10_000,
            0.99,
            0xB0A5,
        );
        assert!(
            est.ci_lo <= exact && exact <= est.ci_hi,
            "d = {d}: oracle {exact} outside [{}, {}]",
            est.ci_lo,
            est.ci_hi
        );
    }
}

/// A root with weight zero has offspring rate zero, so extinction is certain
/// and immediate.
#[test]
fn zero_weight_root_dies_in_the_first_generation() {
    let spec = WeightSpec::from_atoms(&[(0.0, 0.5), (1.0, 0.5)]).unwrap();
    let (est, fates) = estimate_branching_survival(
        &spec,
        4.0,
        5,
        RootWeight::Fixed(0.0),
        50,
        10_000,
        500,
        0.99,
        7,
    );
    assert_eq!(est.point, 0.0);
    assert!(fates
        .iter()
        .all(|f| matches!(f, Fate::Died { first_empty: 1 })));
}

/// Subcritical processes die out: at λ = 0.5 (critical value 1 for ρ ≡ 1)
/// the estimate is statistically zero and no run is censored.
#[test]
fn subcritical_processes_go_extinct() {
    let spec = WeightSpec::constant(1.0).unwrap();
    let (est, _) = estimate_branching_survival(
        &spec,
        0.5,
        5,
        RootWeight::Sampled,
        200,
        10_000,
        5_000,
        0.99,
        21,
    );
    assert!(est.point <= 0.002, "subcritical survival {}", est.point);
    assert_eq!(est.censored, 0);
}

/// Survival is monotone in the infection rate (same seeds, coupled only
/// through the estimator's variance, so allow one combined CI width).
#[test]
fn survival_increases_with_the_rate() {
    let spec = WeightSpec::constant(1.0).unwrap();
    let run = |lambda: f64| {
        estimate_branching_survival(
            &spec,
            lambda,
            6,
            RootWeight::Sampled,
            150,
            10_000,
            4_000,
            0.99,
            3,
        )
        .0
    };
    let lo = run(1.5);
    let hi = run(3.0);
    assert!(
        hi.point > lo.point + (hi.ci_width() + lo.ci_width()) / 2.0,
        "survival not increasing: {} vs {}",
        lo.point,
        hi.point
    );
}

/// `tally_fates` classifies exactly: died + survived + censored = n, with
/// censoring reserved for horizon-limited survivors.
#[test]
fn fate_tally_is_a_partition() {
    let fates = vec![
        Fate::Died { first_empty: 3 },
        Fate::Survived(SurvivalReason::PopulationCap),
        Fate::Survived(SurvivalReason::Horizon),
        Fate::Died { first_empty: 1 },
        Fate::Survived(SurvivalReason::Horizon),
    ];
    let est = tally_fates(&fates, 0.95);
    assert_eq!(est.died, 2);
    assert_eq!(est.survived, 1);
    assert_eq!(est.censored, 2);
    assert_eq!(est.n_runs(), 5);
    assert!((est.point - 3.0 / 5.0).abs() < 1e-12);
}

/// One engine run is reproducible from its rng and reports a consistent
/// outcome triple.
#[test]
fn single_runs_are_reproducible() {
    let spec = WeightSpec::uniform(0.25, 1.25).unwrap();
    let a = run_branching(
        &spec,
        2.0,
        5,
        RootWeight::Sampled,
        100,
        10_000,
        &mut replica_rng(17, 4),
    );
    let b = run_branching(
        &spec,
        2.0,
        5,
        RootWeight::Sampled,
        100,
        10_000,
        &mut replica_rng(17, 4),
    );
    assert_eq!(a.fate, b.fate);
    assert_eq!(a.generations, b.generations);
    assert_eq!(a.peak_population, b.peak_population);
    if let Fate::Died { first_empty } = a.fate {
        assert!(u64::from(first_empty) <= u64::from(a.generations) + 1);
    }
}
