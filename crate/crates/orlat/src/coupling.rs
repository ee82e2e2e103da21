//! Joint construction of the lattice SIR generations {V_n} and the tree
//! branching process {W_n}, and paired extinction-gap experiments.
//!
//! While every generation-n child y has a unique parent in V_n, the two
//! processes can be run in weight-and-clock bijection. The coupling of one
//! step breaks in exactly two ways, checked per parent x:
//!
//! * **(a) shared-target hit** — x succeeds on some y in `q(x) = {y : x → y
//!   and z → y for some z ∈ V_n \ {x}}`: on the lattice that success merges
//!   with another parent's target, which has no tree counterpart;
//! * **(b) extra tree birth** — the tree mirror of x carries `|q(x)|` clocks
//!   with no surviving lattice counterpart (fresh child weights, the shared
//!   parent clock), and one of them fires.
//!
//! A run is *successful* (event B(d)) when neither failure occurs through
//! `⌊σ log d⌋` steps. Within one step, parents are scanned in generation
//! order and condition (a) is checked before (b) for each parent; the first
//! failure ends bookkeeping, so the failure histogram attributes each run to
//! the first cause in that scan order (the success frequency itself does not
//! depend on the order).
//!
//! The window analysis needs `σ log(λM²) < 1/10`; [`default_sigma`] returns
//! `1/(20 log(λM²))`, or 1 when `λM² ≤ 1` (there the constraint is vacuous
//! and the choice is flagged as degenerate).

use crate::harness::{self, wilson_interval};
use crate::lattice::{self, ProbeOutcome, Vertex};
use crate::weights::{Environment, WeightSpec};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, Exp1};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Contact-probe time budget for gap experiments: generous, because a probe
/// on the finite sub-L region either dies or reaches the layer long before.
const PROBE_T_MAX: f64 = 1e6;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error(transparent)]
    Lattice(#[from] lattice::LatticeError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}

/// σ for the coupling window: `1/(20·log(λM²))` when `λM² > 1`, else 1.
pub fn default_sigma(lambda: f64, bound_m: f64) -> f64 {
    let lm2 = lambda * bound_m * bound_m;
    if lm2 > 1.0 {
        1.0 / (20.0 * lm2.ln())
    } else {
        1.0
    }
}

/// `⌊σ log d⌋`, the number of steps the coupling must survive.
pub fn target_steps(sigma: f64, d: u32) -> u32 {
    (sigma * f64::from(d).ln()).floor().max(0.0) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCause {
    None,
    SharedTargetHit,
    ExtraTreeBirth,
}

/// One coupled run of {V_n} and {W_n}.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    /// Largest m such that the step-m bijection is intact.
    pub success_through: u32,
    pub target_steps: u32,
    /// |V_n| for n = 0 ..= success_through.
    pub lattice_sizes: Vec<u64>,
    /// |W_n| over the same range; equal to `lattice_sizes` while coupled.
    pub tree_sizes: Vec<u64>,
    pub failure_cause: FailureCause,
    /// Step at which the bijection broke, when it did.
    pub failure_step: Option<u32>,
}

impl CoupledRun {
    /// Did event B(d) occur?
    pub fn succeeded(&self) -> bool {
        self.success_through >= self.target_steps
    }
}

/// Simulate the coupled pair for `⌊σ log d⌋` steps.
///
/// Lattice weights are realized on first touch and cached for the run (one
/// quenched draw per vertex); tree-only clocks use fresh weights. A run whose
/// V_n dies out couples trivially for the remaining steps: both sides are
/// empty and the (empty) bijection extends.
pub fn run_coupled<R: Rng + ?Sized>(
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    sigma: f64,
    rng: &mut R,
) -> CoupledRun {
    let target = target_steps(sigma, d);
    let mut weights: FxHashMap<Vertex, f64> = FxHashMap::default();
    let weight_of = |v: &Vertex, rng: &mut R, cache: &mut FxHashMap<Vertex, f64>| -> f64 {
        if let Some(&w) = cache.get(v) {
            return w;
        }
        let w = spec.sample(rng);
        cache.insert(v.clone(), w);
        w
    };
    let mut current = vec![Vertex::origin()];
    let mut sizes: Vec<u64> = vec![1];
    for step in 1..=target {
        if current.is_empty() {
            // Both processes are extinct; the empty bijection extends.
            sizes.resize(target as usize + 1, 0);
            break;
        }
        // Parent multiplicity of every potential child: y is a shared target
        // of x iff y = x + e_j = z + e_i for another parent z (then i ≠ j and
        // such z is unique on the oriented lattice).
        let mut parent_count: FxHashMap<Vertex, u32> = FxHashMap::default();
        for z in &current {
            for j in 0..d {
                *parent_count.entry(z.step(j)).or_insert(0) += 1;
            }
        }
        let mut joined: FxHashSet<Vertex> = FxHashSet::default();
        let mut next: Vec<Vertex> = Vec::new();
        for x in &current {
            let rho_x = weight_of(x, rng, &mut weights);
            let y_clock: f64 = Exp1.sample(rng);
            let mut q_x = 0u32;
            for j in 0..d {
                let child = x.step(j);
                let shared = parent_count[&child] >= 2;
                if shared {
                    q_x += 1;
                }
                let rho_y = weight_of(&child, rng, &mut weights);
                let p = -f64::exp_m1(-lambda * rho_x * rho_y * y_clock / f64::from(d));
                if rng.random::<f64>() < p {
                    if shared {
                        return CoupledRun {
                            success_through: step - 1,
                            target_steps: target,
                            lattice_sizes: sizes.clone(),
                            tree_sizes: sizes,
                            failure_cause: FailureCause::SharedTargetHit,
                            failure_step: Some(step),
                        };
                    }
                    if joined.insert(child.clone()) {
                        next.push(child);
                    }
                }
            }
            // Tree-only clocks for the |q(x)| shared targets, with fresh
            // weights (independent copies of ρ) and the same parent clock.
            for _ in 0..q_x {
                let rho_u = spec.sample(rng);
                let p = -f64::exp_m1(-lambda * rho_x * rho_u * y_clock / f64::from(d));
                if rng.random::<f64>() < p {
                    return CoupledRun {
                        success_through: step - 1,
                        target_steps: target,
                        lattice_sizes: sizes.clone(),
                        tree_sizes: sizes,
                        failure_cause: FailureCause::ExtraTreeBirth,
                        failure_step: Some(step),
                    };
                }
            }
        }
        sizes.push(next.len() as u64);
        current = next;
    }
    CoupledRun {
        success_through: target,
        target_steps: target,
        lattice_sizes: sizes.clone(),
        tree_sizes: sizes,
        failure_cause: FailureCause::None,
        failure_step: None,
    }
}

/// Replica estimate of P(B(d)) with a failure-cause histogram.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingReport {
    pub d: u32,
    pub sigma: f64,
    pub target_steps: u32,
    /// True when λM² ≤ 1 made the σ window vacuous (σ = 1 fallback).
    pub sigma_window_degenerate: bool,
    pub successes: u64,
    pub n_runs: u64,
    pub p_success: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub confidence: f64,
    pub shared_target_failures: u64,
    pub extra_tree_failures: u64,
}

/// Run `n_runs` coupled replicas; `sigma = None` applies [`default_sigma`].
pub fn estimate_coupling(
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    sigma: Option<f64>,
    n_runs: u64,
    confidence: f64,
    master_seed: u64,
) -> Result<CouplingReport, CouplingError> {
    let bound_m = spec.bound_m();
    let resolved_sigma = sigma.unwrap_or_else(|| default_sigma(lambda, bound_m));
    let runs = harness::run_replicas(n_runs, 0, |i| {
        let mut rng = harness::replica_rng(master_seed, i);
        let run = run_coupled(spec, lambda, d, resolved_sigma, &mut rng);
        (run.succeeded(), run.failure_cause)
    });
    let mut successes = 0u64;
    let mut shared = 0u64;
    let mut extra = 0u64;
    for (ok, cause) in runs {
        if ok {
            successes += 1;
        }
        match cause {
            FailureCause::SharedTargetHit => shared += 1,
            FailureCause::ExtraTreeBirth => extra += 1,
            FailureCause::None => {}
        }
    }
    let (ci_lo, ci_hi) = wilson_interval(successes, n_runs, confidence)?;
    Ok(CouplingReport {
        d,
        sigma: resolved_sigma,
        target_steps: target_steps(resolved_sigma, d),
        sigma_window_degenerate: lambda * bound_m * bound_m <= 1.0,
        successes,
        n_runs,
        p_success: successes as f64 / n_runs as f64,
        ci_lo,
        ci_hi,
        confidence,
        shared_target_failures: shared,
        extra_tree_failures: extra,
    })
}

/// Paired-independent estimate of
/// `P(β_{⌊σ log d⌋} = ∅) − P(V_{⌊σ log d⌋} = ∅)`.
#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub d: u32,
    pub sigma: f64,
    /// The layer L = ⌊σ log d⌋ whose emptiness both arms measure.
    pub target_layer: u32,
    pub p_beta_empty: f64,
    pub p_v_empty: f64,
    pub gap: f64,
    /// Normal-approximation half-width for the difference at `confidence`.
    pub ci_width: f64,
    pub confidence: f64,
    pub contact_censored: u64,
}

/// Measure the extinction-probability gap by running the two simulators on
/// independent replica sets (indices 0..n for SIR, n..2n for the contact
/// probes, so the arms share no streams). A censored contact probe counts as
/// an occupied layer. When L = 0 the layer is the initial set itself and both
/// probabilities are exactly 0.
pub fn extinction_gap(
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    sigma: Option<f64>,
    n_runs: u64,
    confidence: f64,
    master_seed: u64,
) -> Result<GapReport, CouplingError> {
    let resolved_sigma = sigma.unwrap_or_else(|| default_sigma(lambda, spec.bound_m()));
    let layer = target_steps(resolved_sigma, d);
    if layer == 0 {
        return Ok(GapReport {
            d,
            sigma: resolved_sigma,
            target_layer: 0,
            p_beta_empty: 0.0,
            p_v_empty: 0.0,
            gap: 0.0,
            ci_width: 0.0,
            confidence,
            contact_censored: 0,
        });
    }
    let origin = [Vertex::origin()];
    let v_results = harness::run_replicas(n_runs, 0, |i| {
        let env = Environment::new(harness::replica_env_seed(master_seed, i), spec.clone(), d);
        let mut rng = harness::replica_rng(master_seed, i);
        let run = lattice::run_sir(&env, lambda, &origin, layer, u64::MAX, &mut rng)
            .expect("origin initial set is valid");
        !run.outcome.survived()
    });
    let beta_results = harness::run_replicas(n_runs, n_runs, |i| {
        let env = Environment::new(harness::replica_env_seed(master_seed, i), spec.clone(), d);
        let mut rng = harness::replica_rng(master_seed, i);
        lattice::run_contact_probe(
            &env,
            lambda,
            &origin,
            layer,
            PROBE_T_MAX,
            u64::MAX,
            &mut rng,
        )
        .expect("origin initial set is valid")
    });
    let v_empty = v_results.iter().filter(|&&e| e).count() as u64;
    let mut beta_empty = 0u64;
    let mut censored = 0u64;
    for r in beta_results {
        match r {
            ProbeOutcome::DiedBefore { .. } => beta_empty += 1,
            ProbeOutcome::ReachedLayer => {}
            ProbeOutcome::Censored => censored += 1,
        }
    }
    let n = n_runs as f64;
    let p_v = v_empty as f64 / n;
    let p_beta = beta_empty as f64 / n;
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + 0.5 * confidence);
    let ci_width = z * (p_v * (1.0 - p_v) / n + p_beta * (1.0 - p_beta) / n).sqrt();
    Ok(GapReport {
        d,
        sigma: resolved_sigma,
        target_layer: layer,
        p_beta_empty: p_beta,
        p_v_empty: p_v,
        gap: p_beta - p_v,
        ci_width,
        confidence,
        contact_censored: censored,
    })
}
