//! The oriented lattice Z₊^d: SIR generations and the contact process.
//!
//! Vertices are sparse non-negative coordinate vectors; the edge relation is
//! `x → x + e_j`, so every edge raises the ℓ₁ norm by exactly 1. Two
//! simulators share one quenched weight environment:
//!
//! * [`run_sir`] builds the SIR generations `V_{n+1} = {y : x → y, Ũ(x,y) <
//!   Ỹ(x) for some x ∈ V_n}` exactly: each parent draws one Exp(1) variable
//!   Ỹ(x) and each out-neighbor joins with probability `1 − e^{−λρ(x)ρ(y)Ỹ(x)/d}`,
//!   independently across parents. On the oriented lattice infection cannot
//!   recur between neighbors, which is what makes this generation picture
//!   exact for the SIR dynamics.
//! * [`run_contact`] simulates the contact process in continuous time with
//!   recovery rate 1 and infection rate `(λ/d)·ρ(z)·Σ_{x∈I, x→z} ρ(x)` for
//!   susceptible z; recovered vertices may be reinfected. Aggregate frontier
//!   rates are maintained exactly in a Fenwick tree indexed by interned
//!   vertex ids — event selection costs O(log) and no thinning bias enters.
//!   The incrementally maintained total rate is audited against a
//!   from-scratch recomputation every [`AUDIT_INTERVAL`] events and repaired;
//!   the worst relative drift is reported on the run.
//!
//! The lattice is never materialized: state lives in hash maps and dense
//! arrays over the vertices actually touched.

use crate::branching::{Fate, Outcome, SurvivalReason};
use crate::harness::{self, SurvivalEstimate};
use crate::weights::{Environment, WeightError, WeightSpec};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, Exp1};
use rustc_hash::{FxHashMap, FxHashSet};
use std::collections::BTreeMap;
use thiserror::Error;

/// Events between from-scratch rate audits of the contact simulator.
pub const AUDIT_INTERVAL: u64 = 10_000;
/// Default SIR generation horizon.
pub const DEFAULT_SIR_HORIZON: u32 = 150;
/// Default contact-process time horizon.
pub const DEFAULT_T_MAX: f64 = 300.0;
/// Default ever-infected count that declares survival.
pub const DEFAULT_POP_CAP: u64 = 50_000;

#[derive(Debug, Error)]
pub enum LatticeError {
    /// The SIR generation construction needs all initial vertices on one layer.
    #[error("SIR initial set mixes ℓ₁ norms {0} and {1}; generations would desynchronize")]
    MixedNormInitialSet(u32, u32),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

/// A vertex of Z₊^d in sparse form: sorted `(axis, count)` pairs with positive
/// counts, plus the cached ℓ₁ norm. Ordering is norm-major, so sorted
/// collections iterate layer by layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Vertex {
    norm: u32,
    coords: Vec<(u32, u32)>,
}

impl Vertex {
    pub fn origin() -> Vertex {
        Vertex {
            norm: 0,
            coords: Vec::new(),
        }
    }

    /// The unit vector `e_axis`.
    pub fn unit(axis: u32) -> Vertex {
        Vertex {
            norm: 1,
            coords: vec![(axis, 1)],
        }
    }

    pub fn from_dense(coords: &[u32]) -> Vertex {
        let sparse: Vec<(u32, u32)> = coords
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(a, &c)| (a as u32, c))
            .collect();
        Vertex {
            norm: sparse.iter().map(|&(_, c)| c).sum(),
            coords: sparse,
        }
    }

    /// Build from `(axis, count)` pairs (unsorted, duplicates summed).
    pub fn from_sparse(pairs: &[(u32, u32)]) -> Vertex {
        let mut merged: BTreeMap<u32, u32> = BTreeMap::new();
        for &(a, c) in pairs {
            if c > 0 {
                *merged.entry(a).or_insert(0) += c;
            }
        }
        let coords: Vec<(u32, u32)> = merged.into_iter().collect();
        Vertex {
            norm: coords.iter().map(|&(_, c)| c).sum(),
            coords,
        }
    }

    pub fn to_dense(&self, d: u32) -> Vec<u32> {
        let mut out = vec![0u32; d as usize];
        for &(a, c) in &self.coords {
            out[a as usize] = c;
        }
        out
    }

    pub fn norm(&self) -> u32 {
        self.norm
    }

    pub fn coord(&self, axis: u32) -> u32 {
        self.coords
            .binary_search_by_key(&axis, |&(a, _)| a)
            .map(|i| self.coords[i].1)
            .unwrap_or(0)
    }

    /// Sorted `(axis, count)` pairs with positive counts.
    pub fn sparse(&self) -> &[(u32, u32)] {
        &self.coords
    }

    /// Largest axis with a positive coordinate.
    pub fn max_axis(&self) -> Option<u32> {
        self.coords.last().map(|&(a, _)| a)
    }

    /// The out-neighbor `self + e_axis`.
    pub fn step(&self, axis: u32) -> Vertex {
        let mut coords = self.coords.clone();
        match coords.binary_search_by_key(&axis, |&(a, _)| a) {
            Ok(i) => coords[i].1 += 1,
            Err(i) => coords.insert(i, (axis, 1)),
        }
        Vertex {
            norm: self.norm + 1,
            coords,
        }
    }
}

/// One SIR run: the generation sets `V_0, V_1, …` and the truncation outcome.
#[derive(Debug, Clone)]
pub struct SirRun {
    pub generations: Vec<Vec<Vertex>>,
    pub outcome: Outcome,
}

impl SirRun {
    /// Total vertices ever infected (generations are disjoint layers).
    pub fn ever_infected(&self) -> u64 {
        self.generations.iter().map(|g| g.len() as u64).sum()
    }
}

fn common_norm(initial: &[Vertex]) -> Result<Option<u32>, LatticeError> {
    let mut norms = initial.iter().map(Vertex::norm);
    let Some(first) = norms.next() else {
        return Ok(None);
    };
    for n in norms {
        if n != first {
            return Err(LatticeError::MixedNormInitialSet(first, n));
        }
    }
    Ok(Some(first))
}

fn dedup_vertices(initial: &[Vertex]) -> Vec<Vertex> {
    let mut seen = FxHashSet::default();
    initial
        .iter()
        .filter(|v| seen.insert((*v).clone()))
        .cloned()
        .collect()
}

fn check_dimension(initial: &[Vertex], env: &Environment) -> Result<(), LatticeError> {
    for v in initial {
        if let Some(axis) = v.max_axis() {
            if axis >= env.dimension() {
                return Err(LatticeError::Weight(WeightError::DimensionMismatch {
                    dimension: env.dimension(),
                    axis,
                }));
            }
        }
    }
    Ok(())
}

/// Exact generation-by-generation SIR construction from a single-layer
/// initial set. Survival means the cumulative infected count reached
/// `pop_cap` or generation `horizon` was reached alive (censored); death is
/// the first empty generation.
pub fn run_sir<R: Rng + ?Sized>(
    env: &Environment,
    lambda: f64,
    initial: &[Vertex],
    horizon: u32,
    pop_cap: u64,
    rng: &mut R,
) -> Result<SirRun, LatticeError> {
    common_norm(initial)?;
    check_dimension(initial, env)?;
    let d = env.dimension();
    let v0 = dedup_vertices(initial);
    if v0.is_empty() {
        return Ok(SirRun {
            generations: vec![Vec::new()],
            outcome: Outcome {
                fate: Fate::Died { first_empty: 0 },
                peak_population: 0,
                generations: 0,
            },
        });
    }
    let mut weight_cache: FxHashMap<Vertex, f64> = FxHashMap::default();
    let weight_of = |v: &Vertex, cache: &mut FxHashMap<Vertex, f64>| -> f64 {
        if let Some(&w) = cache.get(v) {
            return w;
        }
        let w = env.vertex_weight(v).expect("dimension validated");
        cache.insert(v.clone(), w);
        w
    };
    let mut cumulative = v0.len() as u64;
    let mut peak = v0.len() as u64;
    let mut generations = vec![v0];
    for n in 0..horizon {
        let current = &generations[n as usize];
        let mut joined: FxHashSet<Vertex> = FxHashSet::default();
        let mut next: Vec<Vertex> = Vec::new();
        for x in current {
            let rho_x = weight_of(x, &mut weight_cache);
            let y_clock: f64 = Exp1.sample(rng);
            for axis in 0..d {
                let child = x.step(axis);
                if joined.contains(&child) {
                    // Already infected by an earlier parent this generation;
                    // further attempts cannot change the union of successes.
                    continue;
                }
                let rho_y = weight_of(&child, &mut weight_cache);
                let p = -f64::exp_m1(-lambda * rho_x * rho_y * y_clock / f64::from(d));
                if rng.random::<f64>() < p {
                    joined.insert(child.clone());
                    next.push(child);
                }
            }
        }
        cumulative += next.len() as u64;
        peak = peak.max(next.len() as u64);
        let empty = next.is_empty();
        let size = next.len() as u64;
        generations.push(next);
        if empty {
            return Ok(SirRun {
                generations,
                outcome: Outcome {
                    fate: Fate::Died { first_empty: n + 1 },
                    peak_population: peak,
                    generations: n + 1,
                },
            });
        }
        if cumulative >= pop_cap && size > 0 {
            return Ok(SirRun {
                generations,
                outcome: Outcome {
                    fate: Fate::Survived(SurvivalReason::PopulationCap),
                    peak_population: peak,
                    generations: n + 1,
                },
            });
        }
    }
    Ok(SirRun {
        generations,
        outcome: Outcome {
            fate: Fate::Survived(SurvivalReason::Horizon),
            peak_population: peak,
            generations: horizon,
        },
    })
}

/// Fenwick (binary indexed) tree over non-negative per-slot rates, supporting
/// append, point update, prefix totals, and O(log n) inverse-CDF search.
struct Fenwick {
    tree: Vec<f64>, // 1-based; tree[i] sums values[i − lowbit(i) .. i)
    values: Vec<f64>,
}

impl Fenwick {
    fn new() -> Fenwick {
        Fenwick {
            tree: vec![0.0],
            values: Vec::new(),
        }
    }

    fn push(&mut self, v: f64) {
        self.values.push(v);
        let k = self.values.len();
        let lb = k & k.wrapping_neg();
        let sum: f64 = self.values[k - lb..k].iter().sum();
        self.tree.push(sum);
    }

    fn set(&mut self, i: usize, v: f64) {
        let delta = v - self.values[i];
        self.values[i] = v;
        let mut pos = i + 1;
        while pos <= self.values.len() {
            self.tree[pos] += delta;
            pos += pos & pos.wrapping_neg();
        }
    }

    fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    fn total(&self) -> f64 {
        let mut pos = self.values.len();
        let mut s = 0.0;
        while pos > 0 {
            s += self.tree[pos];
            pos -= pos & pos.wrapping_neg();
        }
        s
    }

    /// Index of the slot where the running prefix sum first exceeds `u`.
    fn find(&self, u: f64) -> usize {
        let n = self.values.len();
        let mut bit = n.next_power_of_two();
        if bit > n {
            bit >>= 1;
        }
        let mut pos = 0usize;
        let mut rem = u;
        while bit > 0 {
            let next = pos + bit;
            if next <= n && self.tree[next] <= rem {
                rem -= self.tree[next];
                pos = next;
            }
            bit >>= 1;
        }
        pos.min(n.saturating_sub(1))
    }

    fn rebuild_from_values(&mut self) {
        let n = self.values.len();
        self.tree.clear();
        self.tree.push(0.0);
        for k in 1..=n {
            let lb = k & k.wrapping_neg();
            let sum: f64 = self.values[k - lb..k].iter().sum();
            self.tree.push(sum);
        }
    }
}

/// One contact-process run: final time, per-layer ever-infected counts (the
/// β_n sizes), the truncation outcome, and rate-audit telemetry.
#[derive(Debug, Clone)]
pub struct ContactRun {
    pub final_time: f64,
    pub events: u64,
    /// ℓ₁ norm → number of vertices on that layer ever infected.
    pub ever_infected_by_norm: BTreeMap<u32, u64>,
    pub outcome: Outcome,
    /// Worst relative disagreement between the maintained and recomputed
    /// total event rate over all audits (0 when no audit ran).
    pub max_rate_drift: f64,
}

impl ContactRun {
    pub fn ever_infected(&self) -> u64 {
        self.ever_infected_by_norm.values().sum()
    }
}

/// Interned per-vertex state for the contact simulator.
struct Arena<'a> {
    env: &'a Environment,
    lambda_over_d: f64,
    ids: FxHashMap<Vertex, u32>,
    verts: Vec<Vertex>,
    weight: Vec<f64>,
    norm: Vec<u32>,
    infected: Vec<bool>,
    ever: Vec<bool>,
    /// Σ ρ(x) over currently infected in-neighbors x of each vertex.
    in_mass: Vec<f64>,
    children: Vec<Option<Box<[u32]>>>,
    rates: Fenwick,
}

impl<'a> Arena<'a> {
    fn new(env: &'a Environment, lambda: f64) -> Arena<'a> {
        Arena {
            env,
            lambda_over_d: lambda / f64::from(env.dimension()),
            ids: FxHashMap::default(),
            verts: Vec::new(),
            weight: Vec::new(),
            norm: Vec::new(),
            infected: Vec::new(),
            ever: Vec::new(),
            in_mass: Vec::new(),
            children: Vec::new(),
            rates: Fenwick::new(),
        }
    }

    fn know(&mut self, v: Vertex) -> u32 {
        if let Some(&id) = self.ids.get(&v) {
            return id;
        }
        let id = self.verts.len() as u32;
        let w = self.env.vertex_weight(&v).expect("dimension validated");
        self.ids.insert(v.clone(), id);
        self.norm.push(v.norm());
        self.verts.push(v);
        self.weight.push(w);
        self.infected.push(false);
        self.ever.push(false);
        self.in_mass.push(0.0);
        self.children.push(None);
        self.rates.push(0.0);
        id
    }

    fn susceptible_rate(&self, id: usize) -> f64 {
        self.lambda_over_d * self.weight[id] * self.in_mass[id].max(0.0)
    }

    fn ensure_children(&mut self, id: usize) {
        if self.children[id].is_some() {
            return;
        }
        let vert = self.verts[id].clone();
        let d = self.env.dimension();
        let kids: Vec<u32> = (0..d).map(|axis| self.know(vert.step(axis))).collect();
        self.children[id] = Some(kids.into_boxed_slice());
    }

    /// Mark `id` infected; returns true on first-ever infection.
    fn infect(&mut self, id: usize) -> bool {
        self.ensure_children(id);
        self.infected[id] = true;
        self.rates.set(id, 1.0);
        let w = self.weight[id];
        let kids = self.children[id].take().expect("children just built");
        for &cid in kids.iter() {
            let c = cid as usize;
            self.in_mass[c] += w;
            if !self.infected[c] {
                let r = self.susceptible_rate(c);
                self.rates.set(c, r);
            }
        }
        self.children[id] = Some(kids);
        let first = !self.ever[id];
        self.ever[id] = true;
        first
    }

    fn recover(&mut self, id: usize) {
        self.infected[id] = false;
        let r = self.susceptible_rate(id);
        self.rates.set(id, r);
        let w = self.weight[id];
        let kids = self.children[id]
            .take()
            .expect("infected vertex has children");
        for &cid in kids.iter() {
            let c = cid as usize;
            self.in_mass[c] -= w;
            if !self.infected[c] {
                let r = self.susceptible_rate(c);
                self.rates.set(c, r);
            }
        }
        self.children[id] = Some(kids);
    }

    /// Recompute all incoming masses and rates from scratch; returns the
    /// relative drift of the total rate before repair.
    fn audit_and_repair(&mut self) -> f64 {
        let n = self.verts.len();
        let mut fresh = vec![0.0f64; n];
        for id in 0..n {
            if self.infected[id] {
                let w = self.weight[id];
                for &cid in self.children[id]
                    .as_ref()
                    .expect("infected has children")
                    .iter()
                {
                    fresh[cid as usize] += w;
                }
            }
        }
        self.in_mass = fresh;
        let maintained = self.rates.total();
        let mut fresh_total = 0.0;
        for id in 0..n {
            let r = if self.infected[id] {
                1.0
            } else {
                self.susceptible_rate(id)
            };
            fresh_total += r;
            self.rates.values[id] = r;
        }
        self.rates.rebuild_from_values();
        (maintained - fresh_total).abs() / fresh_total.max(f64::MIN_POSITIVE)
    }
}

fn contact_core<R: Rng + ?Sized>(
    env: &Environment,
    lambda: f64,
    initial: &[Vertex],
    t_max: f64,
    pop_cap: u64,
    stop_at_norm: Option<u32>,
    rng: &mut R,
) -> Result<(ContactRun, bool), LatticeError> {
    check_dimension(initial, env)?;
    let mut arena = Arena::new(env, lambda);
    let mut by_norm: BTreeMap<u32, u64> = BTreeMap::new();
    let mut infected_count: u64 = 0;
    let mut ever_count: u64 = 0;
    let mut peak: u64 = 0;
    let mut reached_target = false;
    for v in dedup_vertices(initial) {
        let id = arena.know(v) as usize;
        if arena.infect(id) {
            ever_count += 1;
            *by_norm.entry(arena.norm[id]).or_insert(0) += 1;
            if stop_at_norm == Some(arena.norm[id]) {
                reached_target = true;
            }
        }
        infected_count += 1;
    }
    peak = peak.max(infected_count);
    let mut t = 0.0f64;
    let mut events = 0u64;
    let mut max_drift = 0.0f64;
    let fate = loop {
        if infected_count == 0 {
            let first_empty = by_norm.keys().next_back().map_or(0, |&m| m + 1);
            break Fate::Died { first_empty };
        }
        if ever_count >= pop_cap {
            break Fate::Survived(SurvivalReason::PopulationCap);
        }
        if reached_target {
            // Probe mode: the target layer has been hit; stop early.
            break Fate::Survived(SurvivalReason::PopulationCap);
        }
        let total = arena.rates.total();
        debug_assert!(total > 0.0);
        let wait: f64 = Exp1.sample(rng);
        let t_next = t + wait / total;
        if t_next > t_max {
            t = t_max;
            break Fate::Survived(SurvivalReason::Horizon);
        }
        t = t_next;
        let u = rng.random::<f64>() * total;
        let id = arena.rates.find(u);
        events += 1;
        if arena.infected[id] {
            arena.recover(id);
            infected_count -= 1;
        } else {
            // A susceptible slot can only be selected with positive rate.
            debug_assert!(arena.rates.value(id) > 0.0 || arena.infected[id]);
            if arena.infect(id) {
                ever_count += 1;
                *by_norm.entry(arena.norm[id]).or_insert(0) += 1;
                if stop_at_norm == Some(arena.norm[id]) {
                    reached_target = true;
                }
            }
            infected_count += 1;
            peak = peak.max(infected_count);
        }
        if events.is_multiple_of(AUDIT_INTERVAL) {
            max_drift = max_drift.max(arena.audit_and_repair());
        }
    };
    let deepest = by_norm.keys().next_back().copied().unwrap_or(0);
    Ok((
        ContactRun {
            final_time: t,
            events,
            ever_infected_by_norm: by_norm,
            outcome: Outcome {
                fate,
                peak_population: peak,
                generations: deepest,
            },
            max_rate_drift: max_drift,
        },
        reached_target,
    ))
}

/// Exact event-driven contact-process run. Survival means `pop_cap` distinct
/// vertices were ever infected or the process was alive at `t_max`
/// (censored); death is extinction of the infected set. For a run from a
/// single layer, `Died.first_empty` is the first layer never infected.
pub fn run_contact<R: Rng + ?Sized>(
    env: &Environment,
    lambda: f64,
    initial: &[Vertex],
    t_max: f64,
    pop_cap: u64,
    rng: &mut R,
) -> Result<ContactRun, LatticeError> {
    Ok(contact_core(env, lambda, initial, t_max, pop_cap, None, rng)?.0)
}

/// Outcome of a layer-probe contact run (used for the β_n extinction gap).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeOutcome {
    /// Some vertex of the target norm was infected: β_target ≠ ∅.
    ReachedLayer,
    /// The process died without touching the target layer: β_target = ∅.
    DiedBefore { first_empty: u32 },
    /// Budget exhausted undecided (counted as β_target ≠ ∅ downstream).
    Censored,
}

/// Run the contact process only as far as needed to decide whether the
/// ever-infected layer β_target is empty.
pub fn run_contact_probe<R: Rng + ?Sized>(
    env: &Environment,
    lambda: f64,
    initial: &[Vertex],
    target_norm: u32,
    t_max: f64,
    pop_cap: u64,
    rng: &mut R,
) -> Result<ProbeOutcome, LatticeError> {
    let (run, reached) =
        contact_core(env, lambda, initial, t_max, pop_cap, Some(target_norm), rng)?;
    if reached {
        return Ok(ProbeOutcome::ReachedLayer);
    }
    match run.outcome.fate {
        Fate::Died { first_empty } => Ok(ProbeOutcome::DiedBefore { first_empty }),
        Fate::Survived(_) => Ok(ProbeOutcome::Censored),
    }
}

/// Which lattice process to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessKind {
    Sir,
    Contact,
}

/// Simulation truncation budgets shared by both processes.
#[derive(Debug, Clone, Copy)]
pub struct SimBudget {
    /// SIR generation horizon.
    pub horizon: u32,
    /// Contact time horizon.
    pub t_max: f64,
    /// Ever-infected count that declares survival.
    pub pop_cap: u64,
}

impl Default for SimBudget {
    fn default() -> Self {
        SimBudget {
            horizon: DEFAULT_SIR_HORIZON,
            t_max: DEFAULT_T_MAX,
            pop_cap: DEFAULT_POP_CAP,
        }
    }
}

/// Annealed (or quenched, when `quenched` pins one environment seed) Monte
/// Carlo survival estimate over independent replicas.
#[allow(clippy::too_many_arguments)]
pub fn estimate_survival(
    kind: ProcessKind,
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    initial: &[Vertex],
    budget: SimBudget,
    n_runs: u64,
    confidence: f64,
    master_seed: u64,
    quenched: Option<u64>,
) -> Result<(SurvivalEstimate, Vec<Fate>), LatticeError> {
    if kind == ProcessKind::Sir {
        common_norm(initial)?;
    }
    for v in initial {
        if let Some(axis) = v.max_axis() {
            if axis >= d {
                return Err(LatticeError::Weight(WeightError::DimensionMismatch {
                    dimension: d,
                    axis,
                }));
            }
        }
    }
    let fates = harness::run_replicas(n_runs, 0, |i| {
        let env_seed = quenched.unwrap_or_else(|| harness::replica_env_seed(master_seed, i));
        let env = Environment::new(env_seed, spec.clone(), d);
        let mut rng = harness::replica_rng(master_seed, i);
        match kind {
            ProcessKind::Sir => {
                run_sir(
                    &env,
                    lambda,
                    initial,
                    budget.horizon,
                    budget.pop_cap,
                    &mut rng,
                )
                .expect("inputs validated")
                .outcome
                .fate
            }
            ProcessKind::Contact => {
                run_contact(
                    &env,
                    lambda,
                    initial,
                    budget.t_max,
                    budget.pop_cap,
                    &mut rng,
                )
                .expect("inputs validated")
                .outcome
                .fate
            }
        }
    });
    Ok((crate::branching::tally_fates(&fates, confidence), fates))
}
