//! Monte Carlo simulation of the weighted branching process {W_n} on the
//! oriented rooted tree T^d under the annealed measure.
//!
//! Each individual x with weight ρ_x draws one Exp(1) variable Y; each of its
//! d children y independently receives a fresh weight ρ_y and is born with
//! probability `1 − e^{−λρ_xρ_yY/d}`. Sharing Y across a parent's children
//! reproduces the positive correlation of sibling births; visiting every tree
//! vertex at most once makes on-the-fly weight sampling exactly the annealed
//! law.
//!
//! Two engines implement the same law:
//!
//! * **General**: per child, thinning against the envelope probability
//!   `p_max = 1 − e^{−λρ_xMY/d}` — draw the number of candidate births as a
//!   Binomial(d, p_max), then accept each candidate with probability
//!   `(1 − e^{−λρ_xρ_yY/d})/p_max` using its freshly drawn weight ρ_y. Exact,
//!   at O(population) cost per generation.
//! * **Counts** (constant weight laws): the population size is a Galton–Watson
//!   chain whose offspring distribution `P(K = k) = C(d,k)·E_Y[(1−e^{−βY})^k
//!   e^{−β(d−k)Y}]`, `β = λρ²/d`, is precomputed by Gauss–Laguerre quadrature
//!   in log space; a generation transition samples the multinomial offspring
//!   census by sequential binomials at O(support) cost, independent of the
//!   population size.

use crate::harness::{self, SurvivalEstimate};
use crate::weights::WeightSpec;
use rand::{Rng, RngExt};
use rand_distr::{Binomial, Distribution, Exp1};
use statrs::function::gamma::ln_gamma;

/// Default generation horizon for survival estimation.
pub const DEFAULT_HORIZON: u32 = 200;
/// Default population cap that declares survival.
pub const DEFAULT_POP_CAP: u64 = 100_000;
/// Offspring-distribution mass kept before the tail is lumped (counts engine).
const PMF_MASS: f64 = 1.0 - 1e-14;
/// Laguerre nodes for offspring-pmf integrals.
const PMF_NODES: usize = 256;

/// Why a run was declared a survivor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurvivalReason {
    /// The living population reached the cap.
    PopulationCap,
    /// The process was still alive at the generation horizon (censored).
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    /// `first_empty` is the first empty generation (layer) index.
    Died {
        first_empty: u32,
    },
    Survived(SurvivalReason),
}

/// Result of one finite-truncation run of a layered growth process.
#[derive(Debug, Clone, Copy)]
pub struct Outcome {
    pub fate: Fate,
    /// Largest single-generation population observed.
    pub peak_population: u64,
    /// Number of generations materialized past the root.
    pub generations: u32,
}

impl Outcome {
    pub fn survived(&self) -> bool {
        matches!(self.fate, Fate::Survived(_))
    }

    pub fn censored(&self) -> bool {
        matches!(self.fate, Fate::Survived(SurvivalReason::Horizon))
    }
}

/// Root-weight policy: draw from the law, or condition on a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RootWeight {
    Sampled,
    Fixed(f64),
}

enum Engine {
    General {
        lambda: f64,
        d: u32,
        bound_m: f64,
        spec: WeightSpec,
        root: RootWeight,
    },
    Counts {
        root_pmf: Vec<f64>,
        pmf: Vec<f64>,
    },
}

/// Offspring pmf `P(K = k)` for a parent of weight ρ_x and constant child
/// weight c: `C(d,k)·E_Y[(1−e^{−βY})^k e^{−β(d−k)Y}]` with `β = λρ_xc/d`,
/// truncated once cumulative mass reaches `PMF_MASS` (remainder lumped into
/// the last retained cell so the pmf sums to 1 exactly).
fn offspring_pmf(beta: f64, d: u32) -> Vec<f64> {
    if beta <= 0.0 {
        return vec![1.0];
    }
    let rule = crate::quad::laguerre(PMF_NODES);
    let ln_born: Vec<f64> = rule
        .nodes
        .iter()
        .map(|&y| (-f64::exp_m1(-beta * y)).ln())
        .collect();
    let mut pmf = Vec::new();
    let mut cum = 0.0;
    for k in 0..=d {
        let ln_choose = ln_gamma(f64::from(d) + 1.0)
            - ln_gamma(f64::from(k) + 1.0)
            - ln_gamma(f64::from(d - k) + 1.0);
        let mut p = 0.0;
        for ((&y, &w), &lb) in rule.nodes.iter().zip(&rule.weights).zip(&ln_born) {
            p += w * (ln_choose + f64::from(k) * lb - beta * y * f64::from(d - k)).exp();
        }
        let p = p.clamp(0.0, 1.0 - cum);
        pmf.push(p);
        cum += p;
        if cum >= PMF_MASS {
            break;
        }
    }
    let last = pmf.len() - 1;
    pmf[last] += (1.0 - cum).max(0.0);
    pmf
}

/// Total children of `parents` individuals with i.i.d. offspring counts from
/// `pmf`, via the sequential-binomial decomposition of the multinomial census.
fn multinomial_children<R: Rng + ?Sized>(parents: u64, pmf: &[f64], rng: &mut R) -> u64 {
    let mut remaining = parents;
    let mut rem_mass = 1.0f64;
    let mut children = 0u64;
    for (k, &p) in pmf.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let n_k = if k + 1 == pmf.len() || rem_mass <= p {
            remaining
        } else {
            let cond = (p / rem_mass).clamp(0.0, 1.0);
            Binomial::new(remaining, cond)
                .expect("conditional probability in [0,1]")
                .sample(rng)
        };
        children += k as u64 * n_k;
        remaining -= n_k;
        rem_mass -= p;
    }
    children
}

impl Engine {
    fn new(spec: &WeightSpec, lambda: f64, d: u32, root: RootWeight) -> Engine {
        if let Some(c) = spec.as_constant() {
            let root_w = match root {
                RootWeight::Sampled => c,
                RootWeight::Fixed(s) => s,
            };
            let pmf = offspring_pmf(lambda * c * c / f64::from(d), d);
            let root_pmf = if root_w == c {
                pmf.clone()
            } else {
                offspring_pmf(lambda * root_w * c / f64::from(d), d)
            };
            Engine::Counts { root_pmf, pmf }
        } else {
            Engine::General {
                lambda,
                d,
                bound_m: spec.bound_m(),
                spec: spec.clone(),
                root,
            }
        }
    }

    fn run<R: Rng + ?Sized>(&self, horizon: u32, pop_cap: u64, rng: &mut R) -> Outcome {
        match self {
            Engine::Counts { root_pmf, pmf } => run_counts(root_pmf, pmf, horizon, pop_cap, rng),
            Engine::General {
                lambda,
                d,
                bound_m,
                spec,
                root,
            } => run_general(spec, *lambda, *d, *bound_m, *root, horizon, pop_cap, rng),
        }
    }
}

fn run_counts<R: Rng + ?Sized>(
    root_pmf: &[f64],
    pmf: &[f64],
    horizon: u32,
    pop_cap: u64,
    rng: &mut R,
) -> Outcome {
    let mut population = 1u64;
    let mut peak = 1u64;
    for n in 1..=horizon {
        let dist = if n == 1 { root_pmf } else { pmf };
        population = multinomial_children(population, dist, rng);
        peak = peak.max(population);
        if population == 0 {
            return Outcome {
                fate: Fate::Died { first_empty: n },
                peak_population: peak,
                generations: n,
            };
        }
        if population >= pop_cap {
            return Outcome {
                fate: Fate::Survived(SurvivalReason::PopulationCap),
                peak_population: peak,
                generations: n,
            };
        }
    }
    Outcome {
        fate: Fate::Survived(SurvivalReason::Horizon),
        peak_population: peak,
        generations: horizon,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_general<R: Rng + ?Sized>(
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    bound_m: f64,
    root: RootWeight,
    horizon: u32,
    pop_cap: u64,
    rng: &mut R,
) -> Outcome {
    let root_w = match root {
        RootWeight::Sampled => spec.sample(rng),
        RootWeight::Fixed(s) => s,
    };
    let mut generation = vec![root_w];
    let mut next: Vec<f64> = Vec::new();
    let mut peak = 1u64;
    for n in 1..=horizon {
        next.clear();
        'parents: for &rho_x in &generation {
            let y: f64 = Exp1.sample(rng);
            let p_max = -f64::exp_m1(-lambda * rho_x * bound_m * y / f64::from(d));
            if p_max <= 0.0 {
                continue;
            }
            let candidates = Binomial::new(u64::from(d), p_max.min(1.0))
                .expect("envelope probability in [0,1]")
                .sample(rng);
            for _ in 0..candidates {
                let rho_y = spec.sample(rng);
                let born = lambda * rho_x * rho_y * y / f64::from(d);
                if rng.random::<f64>() * p_max < -f64::exp_m1(-born) {
                    next.push(rho_y);
                    if next.len() as u64 >= pop_cap {
                        break 'parents;
                    }
                }
            }
        }
        peak = peak.max(next.len() as u64);
        if next.is_empty() {
            return Outcome {
                fate: Fate::Died { first_empty: n },
                peak_population: peak,
                generations: n,
            };
        }
        if next.len() as u64 >= pop_cap {
            return Outcome {
                fate: Fate::Survived(SurvivalReason::PopulationCap),
                peak_population: peak,
                generations: n,
            };
        }
        std::mem::swap(&mut generation, &mut next);
    }
    Outcome {
        fate: Fate::Survived(SurvivalReason::Horizon),
        peak_population: peak,
        generations: horizon,
    }
}

/// One run of the branching process; dies at the first empty generation,
/// survives on reaching `pop_cap` living individuals or the generation
/// `horizon` (the latter reported as censored).
pub fn run_branching<R: Rng + ?Sized>(
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    root: RootWeight,
    horizon: u32,
    pop_cap: u64,
    rng: &mut R,
) -> Outcome {
    Engine::new(spec, lambda, d, root).run(horizon, pop_cap, rng)
}

/// Aggregate replica fates into a [`SurvivalEstimate`]: a run that hit the
/// population cap survived, one that outlived the horizon is censored.
pub fn tally_fates(fates: &[Fate], confidence: f64) -> SurvivalEstimate {
    let mut survived = 0;
    let mut died = 0;
    let mut censored = 0;
    for fate in fates {
        match fate {
            Fate::Died { .. } => died += 1,
            Fate::Survived(SurvivalReason::PopulationCap) => survived += 1,
            Fate::Survived(SurvivalReason::Horizon) => censored += 1,
        }
    }
    SurvivalEstimate::from_counts(survived, died, censored, confidence)
        .expect("counts from replica loop are consistent")
}

/// Monte Carlo survival estimate over independent replicas with per-replica
/// derived streams; deterministic for a fixed `master_seed`. Returns the
/// per-replica fates alongside the aggregate, in replica order.
#[allow(clippy::too_many_arguments)]
pub fn estimate_branching_survival(
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    root: RootWeight,
    horizon: u32,
    pop_cap: u64,
    n_runs: u64,
    confidence: f64,
    master_seed: u64,
) -> (SurvivalEstimate, Vec<Fate>) {
    let engine = Engine::new(spec, lambda, d, root);
    let fates = harness::run_replicas(n_runs, 0, |i| {
        let mut rng = harness::replica_rng(master_seed, i);
        engine.run(horizon, pop_cap, &mut rng).fate
    });
    (tally_fates(&fates, confidence), fates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_root_weight_dies_in_generation_one() {
        let spec = WeightSpec::uniform(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let out = run_branching(&spec, 2.0, 5, RootWeight::Fixed(0.0), 50, 1000, &mut rng);
            assert!(matches!(out.fate, Fate::Died { first_empty: 1 }));
        }
        // Same for the counts engine via a constant law.
        let constant = WeightSpec::constant(1.0).unwrap();
        let out = run_branching(
            &constant,
            2.0,
            5,
            RootWeight::Fixed(0.0),
            50,
            1000,
            &mut rng,
        );
        assert!(matches!(out.fate, Fate::Died { first_empty: 1 }));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = WeightSpec::uniform(0.0, 1.0).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_branching(&spec, 3.0, 6, RootWeight::Sampled, 100, 10_000, &mut rng)
        };
        let a = run(99);
        let b = run(99);
        assert_eq!(a.fate, b.fate);
        assert_eq!(a.peak_population, b.peak_population);
        assert_eq!(a.generations, b.generations);
    }

    #[test]
    fn offspring_pmf_has_unit_mass_and_correct_mean() {
        // E K = d·E_Y[1 − e^{−βY}] = d·β/(1+β).
        for (lambda, d) in [(2.0, 5u32), (0.5, 8), (2.0, 100)] {
            let beta = lambda / f64::from(d);
            let pmf = offspring_pmf(beta, d);
            let mass: f64 = pmf.iter().sum();
            assert!((mass - 1.0).abs() < 1e-12);
            let mean: f64 = pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
            let exact = f64::from(d) * beta / (1.0 + beta);
            assert!((mean - exact).abs() < 1e-9, "λ={lambda} d={d}");
        }
    }

    #[test]
    fn multinomial_census_preserves_parent_count() {
        let pmf = offspring_pmf(0.4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Mean offspring over many parents concentrates near the pmf mean.
        let mean_pmf: f64 = pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let total = multinomial_children(100_000, &pmf, &mut rng);
        let mean = total as f64 / 100_000.0;
        assert!((mean - mean_pmf).abs() < 0.05, "{mean} vs {mean_pmf}");
    }

    #[test]
    fn subcritical_process_dies() {
        // λE(ρ²) = 0.5 < 1: extinction almost surely.
        let spec = WeightSpec::constant(1.0).unwrap();
        let (est, fates) = estimate_branching_survival(
            &spec,
            0.5,
            5,
            RootWeight::Sampled,
            500,
            100_000,
            10_000,
            0.99,
            11,
        );
        assert!(est.point <= 0.001, "survival {}", est.point);
        assert_eq!(fates.len() as u64, est.n_runs());
    }
}
