//! Collision statistics of two independent oriented random walks, the
//! collision-time decomposition (τ_l, κ_l, h_l, f_l), the R(x, y) functional
//! built from it, and the resulting survival lower bound.
//!
//! Both walks take uniform `+e_j` steps, so norms grow by one per step and a
//! meeting `ϑ_k = ν_l` forces the alignment `k = l + ‖y‖ − ‖x‖`. The
//! simulator therefore tracks only the aligned difference `ϑ_k − ν_{k−offset}`
//! (sparsely), checks it against zero at each aligned time, and exits early
//! once the remaining steps cannot close the L¹ gap (each aligned step moves
//! the difference by `e_i − e_j`, changing the L¹ norm by at most 2) — an
//! exactness-preserving shortcut, not an approximation.
//!
//! The decomposition follows the first-meeting time τ₀, the starts/ends
//! (τ_l, κ_l) of maximal coincidence runs of length ≥ 2 with h_l = κ_l − τ_l,
//! and the isolated-coincidence counts f_0 … f_T between them. R(x, y) is a
//! product of powers of 2, (1 + λM²/d), M, (λE(ρ²)/d)^{−1}, E(ρ²)^{−1} and —
//! in the two cases with τ₀ = ‖y‖ − ‖x‖ — one factor of 1/Eρ; it is evaluated
//! in log space because the exponents grow linearly in T, Σh and Σf.

use crate::harness::{self, wilson_interval};
use crate::lattice::Vertex;
use crate::weights::WeightSpec;
use rand::{Rng, RngExt};
use rustc_hash::FxHashMap;
use serde::Serialize;
use std::collections::HashMap;
use std::fmt;
use thiserror::Error;

/// Default observation horizon for collision experiments.
pub const DEFAULT_HORIZON: u32 = 1_000;
/// Guard rails for the exhaustive difference-distribution oracle.
const ORACLE_MAX_D: u32 = 6;
const ORACLE_MAX_HORIZON: u32 = 32;

#[derive(Debug, Error)]
pub enum RwalkError {
    #[error("dimension {0} is below the transient regime; need d >= 4")]
    DimensionTooSmall(u32),
    #[error("start pair violates the norm order: |x| = {norm_x} > |y| = {norm_y}")]
    NormOrderViolated { norm_x: u32, norm_y: u32 },
    #[error("collision record is internally inconsistent: {0}")]
    InconsistentRecord(String),
    #[error("start set is empty")]
    EmptyStartSet,
    #[error("rate {lambda} is not above the critical value {critical}")]
    SubcriticalRate { lambda: f64, critical: f64 },
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}

/// Which branch of the R(x, y) display a record selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CaseTag {
    /// No coincidence within the horizon; R = 1.
    NoCollision,
    /// τ₀ > ‖y‖ − ‖x‖.
    Tau0Late,
    /// τ₀ = ‖y‖ − ‖x‖ and τ₀ = τ₁ (the first meeting opens a run).
    Tau0EqualsTau1,
    /// τ₀ = ‖y‖ − ‖x‖ and τ₀ < τ₁ (covers T = 0 with τ₁ = ∞).
    Tau0BeforeTau1,
}

impl fmt::Display for CaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CaseTag::NoCollision => "no-collision",
            CaseTag::Tau0Late => "tau0-late",
            CaseTag::Tau0EqualsTau1 => "tau0-equals-tau1",
            CaseTag::Tau0BeforeTau1 => "tau0-before-tau1",
        };
        f.write_str(s)
    }
}

/// The collision-time decomposition of one simulated pair.
#[derive(Debug, Clone)]
pub struct CollisionRecord {
    /// ‖y‖ − ‖x‖ ≥ 0; coincidences are checked from this time on.
    pub offset: u32,
    /// First coincidence time, `None` when no meeting occurred in-horizon.
    pub tau0: Option<u32>,
    /// Starts τ_1 < τ_2 < … of coincidence runs of length ≥ 2.
    pub taus: Vec<u32>,
    /// Matching run ends κ_l (strictly > τ_l, < τ_{l+1}).
    pub kappas: Vec<u32>,
    /// h_l = κ_l − τ_l ≥ 1.
    pub h: Vec<u32>,
    /// Isolated-coincidence counts f_0 … f_T (always T + 1 entries).
    pub f: Vec<u64>,
    pub case_tag: CaseTag,
    /// True when a coincidence at the horizon left a run or count pending;
    /// the record then reports the quantities seen so far.
    pub truncated: bool,
}

impl CollisionRecord {
    /// T(x, y): the number of completed runs of length ≥ 2.
    pub fn t_runs(&self) -> u32 {
        self.taus.len() as u32
    }

    pub fn sum_h(&self) -> u64 {
        self.h.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn sum_f(&self) -> u64 {
        self.f.iter().sum()
    }

    fn validate(&self) -> Result<(), RwalkError> {
        let t = self.taus.len();
        if self.kappas.len() != t || self.h.len() != t {
            return Err(RwalkError::InconsistentRecord(format!(
                "taus/kappas/h have lengths {}/{}/{}",
                t,
                self.kappas.len(),
                self.h.len()
            )));
        }
        if self.f.len() != t + 1 {
            return Err(RwalkError::InconsistentRecord(format!(
                "expected {} f entries, found {}",
                t + 1,
                self.f.len()
            )));
        }
        for l in 0..t {
            if self.kappas[l] <= self.taus[l] {
                return Err(RwalkError::InconsistentRecord(format!(
                    "kappa_{} = {} does not exceed tau_{} = {}",
                    l + 1,
                    self.kappas[l],
                    l + 1,
                    self.taus[l]
                )));
            }
            if self.h[l] != self.kappas[l] - self.taus[l] {
                return Err(RwalkError::InconsistentRecord(format!(
                    "h_{} = {} but kappa - tau = {}",
                    l + 1,
                    self.h[l],
                    self.kappas[l] - self.taus[l]
                )));
            }
            if l + 1 < t && self.taus[l + 1] <= self.kappas[l] {
                return Err(RwalkError::InconsistentRecord(format!(
                    "tau_{} = {} does not exceed kappa_{} = {}",
                    l + 2,
                    self.taus[l + 1],
                    l + 1,
                    self.kappas[l]
                )));
            }
        }
        match (self.tau0, self.case_tag) {
            (None, CaseTag::NoCollision) => {
                if t != 0 || self.sum_f() != 0 {
                    return Err(RwalkError::InconsistentRecord(
                        "no-collision record carries runs or counts".into(),
                    ));
                }
            }
            (None, tag) => {
                return Err(RwalkError::InconsistentRecord(format!(
                    "tau0 is infinite but the case tag is {tag}"
                )));
            }
            (Some(_), CaseTag::NoCollision) => {
                return Err(RwalkError::InconsistentRecord(
                    "finite tau0 tagged as no-collision".into(),
                ));
            }
            (Some(tau0), tag) => {
                if let Some(&tau1) = self.taus.first() {
                    if tau1 < tau0 {
                        return Err(RwalkError::InconsistentRecord(format!(
                            "tau_1 = {tau1} precedes tau_0 = {tau0}"
                        )));
                    }
                }
                let first_is_run = self.taus.first() == Some(&tau0);
                match tag {
                    CaseTag::Tau0Late if tau0 <= self.offset => {
                        return Err(RwalkError::InconsistentRecord(
                            "tau0-late record with tau0 at the offset".into(),
                        ));
                    }
                    CaseTag::Tau0EqualsTau1 if tau0 > self.offset || !first_is_run => {
                        return Err(RwalkError::InconsistentRecord(
                            "tau0-equals-tau1 record must open a run at the offset".into(),
                        ));
                    }
                    CaseTag::Tau0BeforeTau1 if tau0 > self.offset || first_is_run => {
                        return Err(RwalkError::InconsistentRecord(
                            "tau0-before-tau1 record must start isolated at the offset".into(),
                        ));
                    }
                    _ => {}
                }
                // An isolated first meeting is always counted by f_0.
                if !first_is_run && self.f[0] == 0 {
                    return Err(RwalkError::InconsistentRecord(
                        "isolated tau0 missing from f_0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The constants entering R(x, y).
#[derive(Debug, Clone, Copy)]
pub struct RConstants {
    pub lambda: f64,
    pub bound_m: f64,
    pub mean_rho: f64,
    pub second_moment: f64,
    pub d: u32,
}

impl RConstants {
    pub fn from_spec(spec: &WeightSpec, lambda: f64, d: u32) -> Result<Self, RwalkError> {
        if d < 4 {
            return Err(RwalkError::DimensionTooSmall(d));
        }
        Ok(RConstants {
            lambda,
            bound_m: spec.bound_m(),
            mean_rho: spec.mean(),
            second_moment: spec.second_moment(),
            d,
        })
    }
}

/// Sparse aligned difference `ϑ_k − ν_{k−offset}` with its L¹ norm.
struct DiffState {
    diff: FxHashMap<u32, i64>,
    sum_abs: u64,
}

impl DiffState {
    fn new(x: &Vertex, y: &Vertex) -> Self {
        let mut state = DiffState {
            diff: FxHashMap::default(),
            sum_abs: 0,
        };
        for &(axis, count) in x.sparse() {
            state.add(axis, i64::from(count));
        }
        for &(axis, count) in y.sparse() {
            state.add(axis, -i64::from(count));
        }
        state
    }

    fn add(&mut self, axis: u32, delta: i64) {
        let slot = self.diff.entry(axis).or_insert(0);
        let before = slot.unsigned_abs();
        *slot += delta;
        let after = slot.unsigned_abs();
        if *slot == 0 {
            self.diff.remove(&axis);
        }
        self.sum_abs = self.sum_abs + after - before;
    }

    fn coincident(&self) -> bool {
        self.sum_abs == 0
    }
}

fn check_start_pair(d: u32, x: &Vertex, y: &Vertex) -> Result<u32, RwalkError> {
    if d < 4 {
        return Err(RwalkError::DimensionTooSmall(d));
    }
    if x.norm() > y.norm() {
        return Err(RwalkError::NormOrderViolated {
            norm_x: x.norm(),
            norm_y: y.norm(),
        });
    }
    Ok(y.norm() - x.norm())
}

/// Run the aligned pair and return the coincidence times in [offset, horizon].
/// With `stop_at_first` the walk ends at the first coincidence.
fn walk_coincidences<R: Rng + ?Sized>(
    d: u32,
    x: &Vertex,
    y: &Vertex,
    horizon: u32,
    stop_at_first: bool,
    rng: &mut R,
) -> Result<Vec<u32>, RwalkError> {
    let offset = check_start_pair(d, x, y)?;
    let mut times = Vec::new();
    if offset > horizon {
        return Ok(times);
    }
    let mut state = DiffState::new(x, y);
    for _ in 0..offset {
        state.add(rng.random_range(0..d), 1);
    }
    let mut k = offset;
    loop {
        if state.coincident() {
            times.push(k);
            if stop_at_first {
                return Ok(times);
            }
        }
        if k == horizon || state.sum_abs > 2 * u64::from(horizon - k) {
            return Ok(times);
        }
        state.add(rng.random_range(0..d), 1);
        state.add(rng.random_range(0..d), -1);
        k += 1;
    }
}

/// Build a [`CollisionRecord`] from the sorted coincidence times of one pair.
fn decompose(offset: u32, horizon: u32, times: &[u32]) -> CollisionRecord {
    let Some(&tau0) = times.first() else {
        return CollisionRecord {
            offset,
            tau0: None,
            taus: Vec::new(),
            kappas: Vec::new(),
            h: Vec::new(),
            f: vec![0],
            case_tag: CaseTag::NoCollision,
            truncated: false,
        };
    };
    let truncated = *times.last().expect("nonempty") == horizon;
    // Maximal consecutive runs.
    let mut runs: Vec<(u32, u32)> = Vec::new();
    for &t in times {
        match runs.last_mut() {
            Some((_, end)) if *end + 1 == t => *end = t,
            _ => runs.push((t, t)),
        }
    }
    let mut taus = Vec::new();
    let mut kappas = Vec::new();
    let mut singles: Vec<u32> = Vec::new();
    for &(start, end) in &runs {
        if end > start {
            taus.push(start);
            kappas.push(end);
        } else {
            singles.push(start);
        }
    }
    let t = taus.len();
    let h: Vec<u32> = taus.iter().zip(&kappas).map(|(&a, &b)| b - a).collect();
    let mut f = vec![0u64; t + 1];
    for &s in &singles {
        // Index of the first run starting after s; s sits in the gap before it.
        let bucket = taus.partition_point(|&tau| tau < s);
        f[bucket] += 1;
    }
    let case_tag = if tau0 > offset {
        CaseTag::Tau0Late
    } else if taus.first() == Some(&tau0) {
        CaseTag::Tau0EqualsTau1
    } else {
        CaseTag::Tau0BeforeTau1
    };
    CollisionRecord {
        offset,
        tau0: Some(tau0),
        taus,
        kappas,
        h,
        f,
        case_tag,
        truncated,
    }
}

/// Simulate one pair of walks and extract its collision decomposition.
pub fn simulate_pair<R: Rng + ?Sized>(
    d: u32,
    x: &Vertex,
    y: &Vertex,
    horizon: u32,
    rng: &mut R,
) -> Result<CollisionRecord, RwalkError> {
    let offset = check_start_pair(d, x, y)?;
    let times = walk_coincidences(d, x, y, horizon, false, rng)?;
    Ok(decompose(offset, horizon, &times))
}

/// Evaluate R(x, y) for a record. Truncated records are accepted (the flag
/// travels with the record); inconsistent ones are rejected.
pub fn r_value(record: &CollisionRecord, constants: &RConstants) -> Result<f64, RwalkError> {
    record.validate()?;
    if record.case_tag == CaseTag::NoCollision {
        return Ok(1.0);
    }
    let t = f64::from(record.t_runs());
    let sum_h = record.sum_h() as f64;
    let sum_f = record.sum_f() as f64;
    let c = constants.lambda * constants.bound_m * constants.bound_m / f64::from(constants.d);
    let e2 = constants.second_moment;
    let hl_base = constants.lambda * e2 / f64::from(constants.d);
    // Exponents of 2, (1 + c), M and E(ρ²); the two τ₀-at-offset cases each
    // lose one power of (1 + c), M and E(ρ²) and gain a 1/Eρ.
    let mut ln_r = (t + sum_f) * std::f64::consts::LN_2
        + (4.0 * t + 2.0 * sum_h + 4.0 * sum_f) * c.ln_1p()
        + (6.0 * t + 4.0 * sum_f) * constants.bound_m.ln()
        - sum_h * hl_base.ln()
        - (3.0 * t + 2.0 * sum_f) * e2.ln();
    if record.case_tag != CaseTag::Tau0Late {
        ln_r -= c.ln_1p() + constants.bound_m.ln() - e2.ln() + constants.mean_rho.ln();
    }
    Ok(ln_r.exp())
}

/// Monte Carlo collision-probability estimate.
#[derive(Debug, Clone, Serialize)]
pub struct CollisionReport {
    pub d: u32,
    pub horizon: u32,
    pub n_pairs: u64,
    pub collisions: u64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub confidence: f64,
}

/// Estimate P(τ₀ ≤ horizon) over `n_runs` independent pairs.
pub fn collision_prob(
    d: u32,
    x: &Vertex,
    y: &Vertex,
    horizon: u32,
    n_runs: u64,
    confidence: f64,
    master_seed: u64,
) -> Result<CollisionReport, RwalkError> {
    check_start_pair(d, x, y)?;
    let hits: Vec<bool> = harness::run_replicas(n_runs, 0, |i| {
        let mut rng = harness::replica_rng(master_seed, i);
        let times =
            walk_coincidences(d, x, y, horizon, true, &mut rng).expect("start pair was validated");
        !times.is_empty()
    });
    let collisions = hits.iter().filter(|&&b| b).count() as u64;
    let (ci_lo, ci_hi) = wilson_interval(collisions, n_runs, confidence)?;
    Ok(CollisionReport {
        d,
        horizon,
        n_pairs: n_runs,
        collisions,
        estimate: collisions as f64 / n_runs as f64,
        ci_lo,
        ci_hi,
        confidence,
    })
}

/// Exact truncated collision probability by dynamic programming over the
/// distribution of the aligned difference vector, canonicalized to the sorted
/// multiset of its nonzero entries (the uniform-axis steps are exchangeable,
/// so the multiset is a lossless Markov state). Exponential in the state
/// space: guarded to d ≤ 6 and horizon ≤ 32, as a test oracle.
pub fn collision_prob_exact(d: u32, x: &Vertex, y: &Vertex, horizon: u32) -> f64 {
    assert!(
        d <= ORACLE_MAX_D && horizon <= ORACLE_MAX_HORIZON,
        "the DP oracle is limited to d <= {ORACLE_MAX_D}, horizon <= {ORACLE_MAX_HORIZON}"
    );
    let offset = y.norm().checked_sub(x.norm()).expect("norm order");
    if offset > horizon {
        return 0.0;
    }
    let mut start: Vec<i64> = Vec::new();
    {
        let mut diff: FxHashMap<u32, i64> = FxHashMap::default();
        for &(axis, count) in x.sparse() {
            *diff.entry(axis).or_insert(0) += i64::from(count);
        }
        for &(axis, count) in y.sparse() {
            *diff.entry(axis).or_insert(0) -= i64::from(count);
        }
        start.extend(diff.values().filter(|&&v| v != 0));
        start.sort_unstable();
    }
    let mut dist: HashMap<Vec<i64>, f64> = HashMap::new();
    dist.insert(start, 1.0);
    // One uniform-axis bump of the multiset by ±1.
    let bump = |dist: &HashMap<Vec<i64>, f64>, delta: i64| -> HashMap<Vec<i64>, f64> {
        let mut out: HashMap<Vec<i64>, f64> = HashMap::new();
        for (state, &p) in dist {
            let zeros = d as usize - state.len();
            // The bumped axis holds value v with multiplicity m_v, or 0.
            let mut idx = 0;
            while idx < state.len() {
                let v = state[idx];
                let mut mult = 1;
                while idx + mult < state.len() && state[idx + mult] == v {
                    mult += 1;
                }
                let mut next = state.clone();
                next[idx] = v + delta;
                next.retain(|&u| u != 0);
                next.sort_unstable();
                *out.entry(next).or_insert(0.0) += p * mult as f64 / f64::from(d);
                idx += mult;
            }
            if zeros > 0 {
                let mut next = state.clone();
                next.push(delta);
                next.sort_unstable();
                *out.entry(next).or_insert(0.0) += p * zeros as f64 / f64::from(d);
            }
        }
        out
    };
    for _ in 0..offset {
        dist = bump(&dist, 1);
    }
    let mut absorbed = 0.0;
    for k in offset..=horizon {
        if let Some(p) = dist.remove(&Vec::new()) {
            absorbed += p;
        }
        if k < horizon {
            dist = bump(&dist, 1);
            dist = bump(&dist, -1);
        }
    }
    absorbed
}

/// Per-pair statistics inside a bound report.
#[derive(Debug, Clone, Serialize)]
pub struct PairStats {
    pub norm_x: u32,
    pub norm_y: u32,
    pub mean_r: f64,
    pub std_error: f64,
    pub collisions: u64,
    pub truncated: u64,
}

/// One per-record dump row (kept only on request).
#[derive(Debug, Clone, Serialize)]
pub struct DumpRow {
    pub pair_index: usize,
    pub t_runs: u32,
    pub sum_h: u64,
    pub sum_f: u64,
    pub case_tag: CaseTag,
    pub r: f64,
    pub truncated: bool,
}

/// The Monte Carlo survival lower bound over a start set A.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub lambda: f64,
    pub d: u32,
    pub horizon: u32,
    pub n_runs_per_pair: u64,
    pub n_pairs: usize,
    /// (1/|A|²) ΣΣ estimated E R(x, y) over ordered pairs.
    pub grand_mean: f64,
    /// min(1, 1/grand_mean).
    pub bound: f64,
    /// True when the raw reciprocal exceeded 1 and was clipped.
    pub clipped: bool,
    pub pair_stats: Vec<PairStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<DumpRow>>,
}

/// Estimate the survival lower bound `1 / ((1/|A|²) ΣΣ E R(x, y))`.
///
/// Every ordered pair of A×A is sampled `n_runs` times (for x = y both walks
/// start at the same vertex, offset 0); pairs with ‖x‖ > ‖y‖ are swapped,
/// matching the symmetric definition of the collision time. `collect_rows`
/// keeps one dump row per simulated record.
#[allow(clippy::too_many_arguments)]
pub fn survival_lower_bound(
    set_a: &[Vertex],
    spec: &WeightSpec,
    lambda: f64,
    d: u32,
    horizon: u32,
    n_runs: u64,
    master_seed: u64,
    collect_rows: bool,
) -> Result<BoundReport, RwalkError> {
    if set_a.is_empty() {
        return Err(RwalkError::EmptyStartSet);
    }
    let critical = 1.0 / spec.second_moment();
    if lambda <= critical {
        return Err(RwalkError::SubcriticalRate { lambda, critical });
    }
    let constants = RConstants::from_spec(spec, lambda, d)?;
    let mut pairs: Vec<(Vertex, Vertex)> = Vec::new();
    for x in set_a {
        for y in set_a {
            if x.norm() <= y.norm() {
                pairs.push((x.clone(), y.clone()));
            } else {
                pairs.push((y.clone(), x.clone()));
            }
        }
    }
    let total = pairs.len() as u64 * n_runs;
    let samples: Vec<(f64, CaseTag, bool, u32, u64, u64)> = harness::run_replicas(total, 0, |i| {
        let pair = &pairs[(i / n_runs) as usize];
        let mut rng = harness::replica_rng(master_seed, i);
        let record =
            simulate_pair(d, &pair.0, &pair.1, horizon, &mut rng).expect("pairs were validated");
        let r = r_value(&record, &constants).expect("simulated records are consistent");
        (
            r,
            record.case_tag,
            record.truncated,
            record.t_runs(),
            record.sum_h(),
            record.sum_f(),
        )
    });
    let mut pair_stats = Vec::with_capacity(pairs.len());
    let mut rows = collect_rows.then(|| Vec::with_capacity(samples.len()));
    let mut grand_sum = 0.0;
    for (p, chunk) in samples.chunks(n_runs as usize).enumerate() {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut collisions = 0;
        let mut truncated = 0;
        for &(r, case_tag, trunc, t_runs, sum_h, sum_f) in chunk {
            sum += r;
            sum_sq += r * r;
            collisions += u64::from(case_tag != CaseTag::NoCollision);
            truncated += u64::from(trunc);
            if let Some(rows) = rows.as_mut() {
                rows.push(DumpRow {
                    pair_index: p,
                    t_runs,
                    sum_h,
                    sum_f,
                    case_tag,
                    r,
                    truncated: trunc,
                });
            }
        }
        let n = chunk.len() as f64;
        let mean = sum / n;
        let variance = (sum_sq / n - mean * mean).max(0.0);
        grand_sum += mean;
        pair_stats.push(PairStats {
            norm_x: pairs[p].0.norm(),
            norm_y: pairs[p].1.norm(),
            mean_r: mean,
            std_error: (variance / n).sqrt(),
            collisions,
            truncated,
        });
    }
    let grand_mean = grand_sum / pairs.len() as f64;
    let raw = 1.0 / grand_mean;
    Ok(BoundReport {
        lambda,
        d,
        horizon,
        n_runs_per_pair: n_runs,
        n_pairs: pairs.len(),
        grand_mean,
        bound: raw.min(1.0),
        clipped: raw > 1.0,
        pair_stats,
        rows,
    })
}
