//! Experiment orchestration: replica streams, survival statistics,
//! configuration, and report emission.
//!
//! Every Monte Carlo estimate in the crate flows through the same plumbing:
//! replica `i` of a run with master seed `s` draws its dynamics from
//! [`replica_rng`]`(s, i)` and, for annealed experiments, its weight
//! environment from [`replica_env_seed`]`(s, i)`. Replicas are scheduled with
//! [`run_replicas`], which preserves index order in its output regardless of
//! how the thread pool interleaves the work, so every aggregate downstream is
//! identical between serial and parallel execution.
//!
//! [`run_experiment`] drives a full sweep from an [`ExperimentConfig`]: it
//! iterates the (d, λ) grid in declaration order, derives one seed per cell
//! from the master seed, appends one row per cell to `results.csv` (flushed
//! as soon as the cell completes), and finishes with a `manifest.json` that
//! echoes the config and seeds. Timing lives in the manifest's `excluded`
//! block; everything else is byte-identical across reruns of the same config
//! and seed, regardless of worker count.

use crate::weights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad arguments: {0}")]
    BadArguments(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("runtime failure: {0}")]
    RuntimeFailure(String),
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => HarnessError::IoFailure(io),
                other => HarnessError::RuntimeFailure(format!("csv failure: {other:?}")),
            }
        } else {
            HarnessError::RuntimeFailure(format!("csv failure: {e}"))
        }
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(
    successes: u64,
    trials: u64,
    confidence: f64,
) -> Result<(f64, f64), HarnessError> {
    if trials == 0 {
        return Err(HarnessError::BadArguments("trials must be ≥ 1".into()));
    }
    if successes > trials {
        return Err(HarnessError::BadArguments(format!(
            "successes {successes} exceed trials {trials}"
        )));
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(HarnessError::BadArguments(format!(
            "confidence {confidence} outside (0, 1)"
        )));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + 0.5 * confidence);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2n = z * z / n;
    let center = (p + 0.5 * z2n) / (1.0 + z2n);
    let half = (z / (1.0 + z2n)) * (p * (1.0 - p) / n + 0.25 * z2n / n).sqrt();
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Replica counts with a Wilson interval on the survival frequency.
///
/// `censored` counts replicas that were still alive when the simulation
/// budget ran out without meeting the survival criterion; they enter the
/// point estimate as survivors (the censoring bias is auditable through this
/// field), while `survived` counts criterion-met survivals only.
#[derive(Debug, Clone, Serialize)]
pub struct SurvivalEstimate {
    pub survived: u64,
    pub died: u64,
    pub censored: u64,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub confidence: f64,
}

impl SurvivalEstimate {
    pub fn from_counts(
        survived: u64,
        died: u64,
        censored: u64,
        confidence: f64,
    ) -> Result<Self, HarnessError> {
        let n = survived + died + censored;
        let hits = survived + censored;
        let (ci_lo, ci_hi) = wilson_interval(hits, n, confidence)?;
        Ok(SurvivalEstimate {
            survived,
            died,
            censored,
            point: hits as f64 / n as f64,
            ci_lo,
            ci_hi,
            confidence,
        })
    }

    pub fn n_runs(&self) -> u64 {
        self.survived + self.died + self.censored
    }

    pub fn ci_width(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }
}

/// SplitMix64 stream over the master seed: entry `k` of the derived sequence.
fn seed_word(master_seed: u64, k: u64) -> u64 {
    weights::mix64(master_seed.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Dynamics stream for one replica: a ChaCha8 generator keyed by the master
/// seed with the replica index as the stream number, so distinct replicas use
/// provably disjoint keystreams.
pub fn replica_rng(master_seed: u64, replica: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (c, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&seed_word(master_seed, c as u64).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(replica);
    rng
}

/// Environment seed for one replica, from a lane disjoint from the dynamics
/// stream (annealed estimation: a fresh weight realization per replica).
pub fn replica_env_seed(master_seed: u64, replica: u64) -> u64 {
    weights::mix64(seed_word(master_seed, 0x5eed).wrapping_add(weights::mix64(replica)))
}

/// Run `n_runs` independent replicas indexed `offset .. offset + n_runs` and
/// collect their results in index order. `f` receives the replica index and
/// should derive all randomness from it via [`replica_rng`] /
/// [`replica_env_seed`]; the output order (hence every downstream aggregate)
/// is then independent of thread scheduling.
pub fn run_replicas<T, F>(n_runs: u64, offset: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (offset..offset + n_runs).into_par_iter().map(f).collect()
}

/// Master seed for one grid cell. `slot` is the cell's index along the λ axis
/// (or the pair index for collision sweeps), so every (d, slot) cell draws
/// from its own replica family no matter how the sweep is ordered.
pub fn cell_seed(master_seed: u64, d: u32, slot: usize) -> u64 {
    weights::mix64(master_seed ^ weights::mix64((u64::from(d) << 32) ^ slot as u64))
}

/// Which experiment a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    /// Mean-field fixed point θ(λ) and limiting survival (deterministic).
    Theta,
    /// Extinction-profile fixed point F_d on a grid (deterministic).
    Fgrid,
    /// Branching-process survival on the d-ary tree (Monte Carlo).
    Branching,
    /// SIR generation-set survival on the oriented lattice (Monte Carlo).
    Sir,
    /// Contact-process survival on the oriented lattice (Monte Carlo).
    Contact,
    /// Tree/lattice coupling success probability over ⌊σ ln d⌋ steps.
    Couple,
    /// Extinction gap between the coupled tree and lattice at the target layer.
    Gap,
    /// Random-walk collision statistics and the survival lower bound.
    Rwalk,
}

impl Process {
    pub fn name(self) -> &'static str {
        match self {
            Process::Theta => "theta",
            Process::Fgrid => "fgrid",
            Process::Branching => "branching",
            Process::Sir => "sir",
            Process::Contact => "contact",
            Process::Couple => "couple",
            Process::Gap => "gap",
            Process::Rwalk => "rwalk",
        }
    }
}

/// Sub-mode of the `rwalk` process, selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RwalkMode {
    /// Estimate P(τ₀ ≤ horizon) for each configured start pair.
    #[default]
    Collide,
    /// Evaluate the survival lower bound over the configured start set.
    Bound,
}

fn default_n_runs() -> u64 {
    10_000
}

fn default_confidence() -> f64 {
    0.99
}

fn default_grid_points() -> usize {
    129
}

fn default_tol() -> f64 {
    1e-10
}

/// One experiment sweep, deserialized from TOML. Optional truncation fields
/// fall back to the owning module's defaults; `ds` may be empty only for the
/// θ process, which has no dimension axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub process: Process,
    /// Weight law in raw form: `atoms = [[value, prob], ...]` and/or
    /// `segments = [[lo, hi, prob], ...]`.
    pub weights: weights::RawWeightLaw,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub ds: Vec<u32>,
    #[serde(default = "default_n_runs")]
    pub n_runs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pop_cap: Option<u64>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Coupling window scale σ; `None` uses the default 1/(20 ln λM²).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Start pairs for `rwalk` collision sweeps, as dense coordinate vectors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub collide_pairs: Vec<(Vec<u32>, Vec<u32>)>,
    /// Start set A for the `rwalk` survival bound, as dense coordinate vectors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bound_set: Vec<Vec<u32>>,
}

impl ExperimentConfig {
    /// Parse and validate a TOML config file.
    pub fn from_toml_path(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = fs::read_to_string(path)?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| HarnessError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Structural checks that do not depend on the run options.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |msg: String| Err(HarnessError::ConfigInvalid(msg));
        weights::WeightSpec::validate(&self.weights)
            .map_err(|e| HarnessError::ConfigInvalid(format!("weights: {e}")))?;
        if self.lambdas.is_empty() {
            return invalid("lambdas must be non-empty".into());
        }
        for &lambda in &self.lambdas {
            if !lambda.is_finite() || lambda < 0.0 {
                return invalid(format!("lambda {lambda} must be finite and non-negative"));
            }
        }
        if self.process != Process::Theta {
            if self.ds.is_empty() {
                return invalid(format!(
                    "ds must be non-empty for process {}",
                    self.process.name()
                ));
            }
            for &d in &self.ds {
                if d == 0 {
                    return invalid("dimensions must be positive".into());
                }
            }
        }
        if self.n_runs == 0 {
            return invalid("n_runs must be positive".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return invalid(format!("confidence {} must lie in (0, 1)", self.confidence));
        }
        if self.grid_points < 9 {
            return invalid(format!(
                "grid_points {} is too coarse (need at least 9)",
                self.grid_points
            ));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return invalid(format!("tol {} must be a positive finite number", self.tol));
        }
        if let Some(h) = self.horizon {
            if h == 0 {
                return invalid("horizon must be positive".into());
            }
        }
        if let Some(t) = self.t_max {
            if !(t > 0.0 && t.is_finite()) {
                return invalid(format!("t_max {t} must be positive and finite"));
            }
        }
        if let Some(p) = self.pop_cap {
            if p == 0 {
                return invalid("pop_cap must be positive".into());
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return invalid(format!("sigma {s} must be positive and finite"));
            }
        }
        if self.process == Process::Rwalk
            && self.collide_pairs.is_empty()
            && self.bound_set.is_empty()
        {
            return invalid("rwalk needs collide_pairs or bound_set".into());
        }
        Ok(())
    }
}

/// Command-line switches that modify how a config is executed.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Override the config's output directory.
    pub out_dir: Option<PathBuf>,
    /// Override the config's master seed.
    pub seed: Option<u64>,
    /// Pin every lattice replica to one weight environment (quenched runs).
    pub quenched: Option<u64>,
    /// Emit `replicas.csv` with one row per replica outcome.
    pub log: bool,
    /// Emit `records.csv` with one row per simulated collision record.
    pub dump: bool,
    /// Sub-mode for the `rwalk` process.
    pub rwalk_mode: RwalkMode,
    /// Restrict an fgrid sweep to this single dimension.
    pub fgrid_d: Option<u32>,
}

/// What a finished run produced; the CLI prints this as JSON.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub process: Process,
    pub out_dir: PathBuf,
    pub results_csv: PathBuf,
    /// Rows written to `results.csv`.
    pub cells: usize,
    pub summaries: Vec<serde_json::Value>,
}

/// Column order of `results.csv`. Columns that do not apply to a process are
/// left empty rather than reshuffled, so every run shares one stable schema.
pub const RESULTS_SCHEMA: [&str; 8] = [
    "d",
    "lambda",
    "point",
    "ci_lo",
    "ci_hi",
    "censored",
    "limit_survival",
    "abs_gap",
];

struct Row {
    d: Option<u32>,
    lambda: Option<f64>,
    point: f64,
    ci_lo: f64,
    ci_hi: f64,
    censored: u64,
    limit_survival: Option<f64>,
    abs_gap: Option<f64>,
}

/// Shortest round-trip decimal form (`format!("{}")`), so rewriting a parsed
/// CSV reproduces it byte for byte.
fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn push_row(w: &mut csv::Writer<fs::File>, row: &Row) -> Result<(), HarnessError> {
    w.write_record([
        row.d.map(|d| d.to_string()).unwrap_or_default(),
        row.lambda.map(fmt_f).unwrap_or_default(),
        fmt_f(row.point),
        fmt_f(row.ci_lo),
        fmt_f(row.ci_hi),
        row.censored.to_string(),
        row.limit_survival.map(fmt_f).unwrap_or_default(),
        row.abs_gap.map(fmt_f).unwrap_or_default(),
    ])?;
    w.flush()?;
    Ok(())
}

fn push_log(
    log: &mut Option<csv::Writer<fs::File>>,
    d: u32,
    lambda: f64,
    fates: &[crate::branching::Fate],
) -> Result<(), HarnessError> {
    use crate::branching::{Fate, SurvivalReason};
    let Some(w) = log.as_mut() else {
        return Ok(());
    };
    for (replica, fate) in fates.iter().enumerate() {
        let (outcome, first_empty) = match fate {
            Fate::Died { first_empty } => ("died", first_empty.to_string()),
            Fate::Survived(SurvivalReason::PopulationCap) => ("survived", String::new()),
            Fate::Survived(SurvivalReason::Horizon) => ("censored", String::new()),
        };
        w.write_record([
            d.to_string(),
            fmt_f(lambda),
            replica.to_string(),
            outcome.to_string(),
            first_empty,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Limiting (d → ∞) survival probability, taking the subcritical branch as 0.
fn limit_survival_of(spec: &weights::WeightSpec, lambda: f64) -> Result<f64, HarnessError> {
    use crate::meanfield::{solve_theta, MeanFieldError};
    match solve_theta(spec, lambda) {
        Ok(sol) => Ok(sol.limit_survival),
        Err(MeanFieldError::SubcriticalRate { .. }) => Ok(0.0),
        Err(e) => Err(HarnessError::RuntimeFailure(e.to_string())),
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::RuntimeFailure(e.to_string())
}

/// Execute a validated config: one row per grid cell appended to
/// `results.csv` (flushed per cell), per-process side files, and a
/// `manifest.json` written only if every cell succeeded. A failing cell
/// leaves the partial CSV plus a `FAILED.txt` marker in the output directory.
pub fn run_experiment(
    config: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<RunSummary, HarnessError> {
    use std::time::{Instant, SystemTime, UNIX_EPOCH};
    config.validate()?;
    check_option_scope(config, opts)?;
    let started = Instant::now();
    let started_at_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|t| t.as_millis() as u64)
        .unwrap_or(0);

    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(config.process.name()));
    fs::create_dir_all(&out_dir)?;
    let master_seed = opts.seed.unwrap_or(config.master_seed);
    let spec = weights::WeightSpec::validate(&config.weights)
        .map_err(|e| HarnessError::ConfigInvalid(format!("weights: {e}")))?;

    let csv_path = out_dir.join("results.csv");
    let mut rows = csv::Writer::from_path(&csv_path)?;
    rows.write_record(RESULTS_SCHEMA)?;
    rows.flush()?;

    let mut log = if opts.log {
        let mut w = csv::Writer::from_path(out_dir.join("replicas.csv"))?;
        w.write_record(["d", "lambda", "replica", "outcome", "first_empty"])?;
        Some(w)
    } else {
        None
    };

    let mut summaries: Vec<serde_json::Value> = Vec::new();
    let mut cells = 0usize;
    let result = drive(
        config,
        opts,
        &spec,
        master_seed,
        &out_dir,
        &mut rows,
        &mut log,
        &mut summaries,
        &mut cells,
    );
    rows.flush()?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Err(e) = result {
        let _ = fs::write(out_dir.join("FAILED.txt"), format!("{e}\n"));
        return Err(e);
    }

    let manifest = serde_json::json!({
        "format_version": 1,
        "process": config.process,
        "config": config,
        "resolved": {
            "master_seed": master_seed,
            "quenched": opts.quenched,
            "log": opts.log,
            "dump": opts.dump,
            "cells": cells,
        },
        "csv_schema": RESULTS_SCHEMA,
        "summaries": summaries,
        "excluded": {
            "started_at_unix_ms": started_at_unix_ms,
            "wall_ms": started.elapsed().as_millis() as u64,
        },
    });
    let mut text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    text.push('\n');
    fs::write(out_dir.join("manifest.json"), text)?;

    Ok(RunSummary {
        process: config.process,
        out_dir: out_dir.clone(),
        results_csv: csv_path,
        cells,
        summaries,
    })
}

/// Reject option/process combinations that would silently do nothing.
fn check_option_scope(config: &ExperimentConfig, opts: &RunOptions) -> Result<(), HarnessError> {
    let p = config.process;
    let survival = matches!(p, Process::Branching | Process::Sir | Process::Contact);
    if opts.log && !survival {
        return Err(HarnessError::ConfigInvalid(format!(
            "--log applies to branching, sir, and contact runs, not {}",
            p.name()
        )));
    }
    if opts.quenched.is_some() && !matches!(p, Process::Sir | Process::Contact) {
        return Err(HarnessError::ConfigInvalid(format!(
            "--quenched applies to sir and contact runs, not {}",
            p.name()
        )));
    }
    if opts.dump && !(p == Process::Rwalk && opts.rwalk_mode == RwalkMode::Bound) {
        return Err(HarnessError::ConfigInvalid(
            "--dump applies to rwalk bound runs only".into(),
        ));
    }
    if opts.fgrid_d.is_some() && p != Process::Fgrid {
        return Err(HarnessError::ConfigInvalid(format!(
            "--d applies to fgrid runs, not {}",
            p.name()
        )));
    }
    if p == Process::Rwalk {
        match opts.rwalk_mode {
            RwalkMode::Collide if config.collide_pairs.is_empty() => {
                return Err(HarnessError::ConfigInvalid(
                    "rwalk collide needs collide_pairs in the config".into(),
                ));
            }
            RwalkMode::Bound if config.bound_set.is_empty() => {
                return Err(HarnessError::ConfigInvalid(
                    "rwalk bound needs bound_set in the config".into(),
                ));
            }
            _ => {}
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn drive(
    config: &ExperimentConfig,
    opts: &RunOptions,
    spec: &weights::WeightSpec,
    master_seed: u64,
    out_dir: &Path,
    rows: &mut csv::Writer<fs::File>,
    log: &mut Option<csv::Writer<fs::File>>,
    summaries: &mut Vec<serde_json::Value>,
    cells: &mut usize,
) -> Result<(), HarnessError> {
    use crate::{branching, coupling, fgrid, lattice, meanfield, rwalk};
    use serde_json::json;

    match config.process {
        Process::Theta => {
            for &lambda in &config.lambdas {
                let sol = meanfield::solve_theta(spec, lambda).map_err(runtime)?;
                push_row(
                    rows,
                    &Row {
                        d: None,
                        lambda: Some(lambda),
                        point: sol.limit_survival,
                        ci_lo: sol.limit_survival,
                        ci_hi: sol.limit_survival,
                        censored: 0,
                        limit_survival: Some(sol.limit_survival),
                        abs_gap: Some(0.0),
                    },
                )?;
                *cells += 1;
                summaries.push(json!({
                    "process": "theta",
                    "lambda": lambda,
                    "lambda_c": meanfield::critical_rate(spec),
                    "theta": sol.theta,
                    "limit_survival": sol.limit_survival,
                    "residual": sol.residual,
                }));
            }
        }
        Process::Fgrid => {
            let ds: Vec<u32> = match opts.fgrid_d {
                Some(d) => vec![d],
                None => config.ds.clone(),
            };
            for &d in &ds {
                for &lambda in &config.lambdas {
                    let grid = fgrid::solve_fgrid(spec, lambda, d, config.grid_points, config.tol)
                        .map_err(runtime)?;
                    let point = fgrid::branching_survival_d(&grid, spec);
                    let limit = limit_survival_of(spec, lambda)?;
                    let profile = fgrid::limit_profile(spec, lambda).ok();
                    let mut sup_gap: Option<f64> = None;
                    let name = format!("fgrid_d{}_lambda{}.csv", d, fmt_f(lambda));
                    let mut pw = csv::Writer::from_path(out_dir.join(&name))?;
                    pw.write_record(["s", "f_d", "f_limit", "abs_gap"])?;
                    for (s, v) in grid.s_nodes.iter().zip(&grid.values) {
                        let (fl, gap) = match &profile {
                            Some(p) => {
                                let fl = p.eval(*s);
                                let gap = (v - fl).abs();
                                sup_gap = Some(sup_gap.unwrap_or(0.0).max(gap));
                                (fmt_f(fl), fmt_f(gap))
                            }
                            None => (String::new(), String::new()),
                        };
                        pw.write_record([fmt_f(*s), fmt_f(*v), fl, gap])?;
                    }
                    pw.flush()?;
                    push_row(
                        rows,
                        &Row {
                            d: Some(d),
                            lambda: Some(lambda),
                            point,
                            ci_lo: point,
                            ci_hi: point,
                            censored: 0,
                            limit_survival: Some(limit),
                            abs_gap: Some((point - limit).abs()),
                        },
                    )?;
                    *cells += 1;
                    summaries.push(json!({
                        "process": "fgrid",
                        "d": d,
                        "lambda": lambda,
                        "point": point,
                        "limit_survival": limit,
                        "sup_gap": sup_gap,
                        "iterations": grid.iterations,
                        "sup_residual": grid.sup_residual,
                        "laguerre_nodes": grid.laguerre_nodes,
                        "profile_csv": name,
                    }));
                }
            }
        }
        Process::Branching => {
            let horizon = config.horizon.unwrap_or(branching::DEFAULT_HORIZON);
            let pop_cap = config.pop_cap.unwrap_or(branching::DEFAULT_POP_CAP);
            for &d in &config.ds {
                for (slot, &lambda) in config.lambdas.iter().enumerate() {
                    let (est, fates) = branching::estimate_branching_survival(
                        spec,
                        lambda,
                        d,
                        branching::RootWeight::Sampled,
                        horizon,
                        pop_cap,
                        config.n_runs,
                        config.confidence,
                        cell_seed(master_seed, d, slot),
                    );
                    push_log(log, d, lambda, &fates)?;
                    let oracle =
                        fgrid::solve_fgrid(spec, lambda, d, config.grid_points, config.tol)
                            .map(|g| fgrid::branching_survival_d(&g, spec))
                            .map_err(runtime)?;
                    let limit = limit_survival_of(spec, lambda)?;
                    push_row(
                        rows,
                        &Row {
                            d: Some(d),
                            lambda: Some(lambda),
                            point: est.point,
                            ci_lo: est.ci_lo,
                            ci_hi: est.ci_hi,
                            censored: est.censored,
                            limit_survival: Some(limit),
                            abs_gap: Some((est.point - limit).abs()),
                        },
                    )?;
                    *cells += 1;
                    summaries.push(json!({
                        "process": "branching",
                        "d": d,
                        "lambda": lambda,
                        "estimate": est,
                        "oracle_fgrid": oracle,
                        "limit_survival": limit,
                        "horizon": horizon,
                        "pop_cap": pop_cap,
                    }));
                }
            }
        }
        Process::Sir | Process::Contact => {
            let kind = if config.process == Process::Sir {
                lattice::ProcessKind::Sir
            } else {
                lattice::ProcessKind::Contact
            };
            let budget = lattice::SimBudget {
                horizon: config.horizon.unwrap_or(lattice::DEFAULT_SIR_HORIZON),
                t_max: config.t_max.unwrap_or(lattice::DEFAULT_T_MAX),
                pop_cap: config.pop_cap.unwrap_or(lattice::DEFAULT_POP_CAP),
            };
            let initial = [lattice::Vertex::origin()];
            for &d in &config.ds {
                for (slot, &lambda) in config.lambdas.iter().enumerate() {
                    let (est, fates) = lattice::estimate_survival(
                        kind,
                        spec,
                        lambda,
                        d,
                        &initial,
                        budget,
                        config.n_runs,
                        config.confidence,
                        cell_seed(master_seed, d, slot),
                        opts.quenched,
                    )
                    .map_err(runtime)?;
                    push_log(log, d, lambda, &fates)?;
                    let limit = limit_survival_of(spec, lambda)?;
                    push_row(
                        rows,
                        &Row {
                            d: Some(d),
                            lambda: Some(lambda),
                            point: est.point,
                            ci_lo: est.ci_lo,
                            ci_hi: est.ci_hi,
                            censored: est.censored,
                            limit_survival: Some(limit),
                            abs_gap: Some((est.point - limit).abs()),
                        },
                    )?;
                    *cells += 1;
                    summaries.push(json!({
                        "process": config.process.name(),
                        "d": d,
                        "lambda": lambda,
                        "estimate": est,
                        "limit_survival": limit,
                        "horizon": budget.horizon,
                        "t_max": budget.t_max,
                        "pop_cap": budget.pop_cap,
                        "quenched": opts.quenched,
                    }));
                }
            }
        }
        Process::Couple => {
            for &d in &config.ds {
                for (slot, &lambda) in config.lambdas.iter().enumerate() {
                    let report = coupling::estimate_coupling(
                        spec,
                        lambda,
                        d,
                        config.sigma,
                        config.n_runs,
                        config.confidence,
                        cell_seed(master_seed, d, slot),
                    )
                    .map_err(runtime)?;
                    push_row(
                        rows,
                        &Row {
                            d: Some(d),
                            lambda: Some(lambda),
                            point: report.p_success,
                            ci_lo: report.ci_lo,
                            ci_hi: report.ci_hi,
                            censored: 0,
                            limit_survival: None,
                            abs_gap: None,
                        },
                    )?;
                    *cells += 1;
                    let mut value = serde_json::to_value(&report).map_err(runtime)?;
                    value["process"] = json!("couple");
                    value["lambda"] = json!(lambda);
                    summaries.push(value);
                }
            }
        }
        Process::Gap => {
            for &d in &config.ds {
                for (slot, &lambda) in config.lambdas.iter().enumerate() {
                    let report = coupling::extinction_gap(
                        spec,
                        lambda,
                        d,
                        config.sigma,
                        config.n_runs,
                        config.confidence,
                        cell_seed(master_seed, d, slot),
                    )
                    .map_err(runtime)?;
                    push_row(
                        rows,
                        &Row {
                            d: Some(d),
                            lambda: Some(lambda),
                            point: report.gap,
                            ci_lo: report.gap - report.ci_width,
                            ci_hi: report.gap + report.ci_width,
                            censored: report.contact_censored,
                            limit_survival: None,
                            abs_gap: Some(report.gap.abs()),
                        },
                    )?;
                    *cells += 1;
                    let mut value = serde_json::to_value(&report).map_err(runtime)?;
                    value["process"] = json!("gap");
                    value["lambda"] = json!(lambda);
                    summaries.push(value);
                }
            }
        }
        Process::Rwalk => match opts.rwalk_mode {
            RwalkMode::Collide => {
                let horizon = config.horizon.unwrap_or(rwalk::DEFAULT_HORIZON);
                for &d in &config.ds {
                    for (slot, (a, b)) in config.collide_pairs.iter().enumerate() {
                        let mut x = lattice::Vertex::from_dense(a);
                        let mut y = lattice::Vertex::from_dense(b);
                        if x.norm() > y.norm() {
                            std::mem::swap(&mut x, &mut y);
                        }
                        let report = rwalk::collision_prob(
                            d,
                            &x,
                            &y,
                            horizon,
                            config.n_runs,
                            config.confidence,
                            cell_seed(master_seed, d, slot),
                        )
                        .map_err(runtime)?;
                        push_row(
                            rows,
                            &Row {
                                d: Some(d),
                                lambda: None,
                                point: report.estimate,
                                ci_lo: report.ci_lo,
                                ci_hi: report.ci_hi,
                                censored: 0,
                                limit_survival: None,
                                abs_gap: None,
                            },
                        )?;
                        *cells += 1;
                        let mut value = serde_json::to_value(&report).map_err(runtime)?;
                        value["process"] = json!("rwalk-collide");
                        value["pair"] = json!([a, b]);
                        summaries.push(value);
                    }
                }
            }
            RwalkMode::Bound => {
                let horizon = config.horizon.unwrap_or(rwalk::DEFAULT_HORIZON);
                let set: Vec<lattice::Vertex> = config
                    .bound_set
                    .iter()
                    .map(|v| lattice::Vertex::from_dense(v))
                    .collect();
                let mut dump = if opts.dump {
                    let mut w = csv::Writer::from_path(out_dir.join("records.csv"))?;
                    w.write_record([
                        "d",
                        "lambda",
                        "pair_index",
                        "t_runs",
                        "sum_h",
                        "sum_f",
                        "case_tag",
                        "r",
                        "truncated",
                    ])?;
                    Some(w)
                } else {
                    None
                };
                for &d in &config.ds {
                    for (slot, &lambda) in config.lambdas.iter().enumerate() {
                        let mut report = rwalk::survival_lower_bound(
                            &set,
                            spec,
                            lambda,
                            d,
                            horizon,
                            config.n_runs,
                            cell_seed(master_seed, d, slot),
                            opts.dump,
                        )
                        .map_err(runtime)?;
                        if let (Some(w), Some(records)) = (dump.as_mut(), report.rows.take()) {
                            for r in &records {
                                w.write_record([
                                    d.to_string(),
                                    fmt_f(lambda),
                                    r.pair_index.to_string(),
                                    r.t_runs.to_string(),
                                    r.sum_h.to_string(),
                                    r.sum_f.to_string(),
                                    r.case_tag.to_string(),
                                    fmt_f(r.r),
                                    r.truncated.to_string(),
                                ])?;
                            }
                            w.flush()?;
                        }
                        push_row(
                            rows,
                            &Row {
                                d: Some(d),
                                lambda: Some(lambda),
                                point: report.bound,
                                ci_lo: report.bound,
                                ci_hi: report.bound,
                                censored: 0,
                                limit_survival: None,
                                abs_gap: None,
                            },
                        )?;
                        *cells += 1;
                        let mut value = serde_json::to_value(&report).map_err(runtime)?;
                        value["process"] = json!("rwalk-bound");
                        summaries.push(value);
                    }
                }
            }
        },
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn wilson_interval_reference_values() {
        // Frozen from the Wilson score formula with z = 1.9599639845400542.
        let (lo, hi) = wilson_interval(50, 100, 0.95).unwrap();
        assert!((lo - 0.4038315303656829).abs() < 1e-3);
        assert!((hi - 0.5961684696343171).abs() < 1e-3);
        assert_eq!(wilson_interval(0, 100, 0.95).unwrap().0, 0.0);
        assert_eq!(wilson_interval(100, 100, 0.95).unwrap().1, 1.0);
    }

    #[test]
    fn wilson_interval_rejects_bad_arguments() {
        assert!(wilson_interval(1, 0, 0.95).is_err());
        assert!(wilson_interval(5, 4, 0.95).is_err());
        assert!(wilson_interval(1, 2, 1.0).is_err());
        assert!(wilson_interval(1, 2, 0.0).is_err());
    }

    #[test]
    fn estimate_counts_are_consistent() {
        let est = SurvivalEstimate::from_counts(30, 60, 10, 0.99).unwrap();
        assert_eq!(est.n_runs(), 100);
        assert!((est.point - 0.4).abs() < 1e-12);
        assert!(est.ci_lo <= est.point && est.point <= est.ci_hi);
    }

    #[test]
    fn replica_streams_are_disjoint() {
        let mut a = replica_rng(7, 0);
        let mut b = replica_rng(7, 1);
        let mut c = replica_rng(7, 0);
        let xs: Vec<u64> = (0..64).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.random()).collect();
        let zs: Vec<u64> = (0..64).map(|_| c.random()).collect();
        assert_ne!(xs, ys);
        assert_eq!(xs, zs);
        assert_ne!(replica_env_seed(7, 0), replica_env_seed(7, 1));
        assert_ne!(replica_env_seed(7, 0), replica_env_seed(8, 0));
    }

    #[test]
    fn run_replicas_preserves_index_order() {
        let out = run_replicas(100, 5, |i| i * i);
        assert_eq!(out.len(), 100);
        for (k, v) in out.iter().enumerate() {
            let i = 5 + k as u64;
            assert_eq!(*v, i * i);
        }
    }
}
