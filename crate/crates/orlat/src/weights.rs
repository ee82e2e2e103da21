//! Vertex-weight laws and the quenched environment oracle.
//!
//! A weight law describes the distribution of the i.i.d. vertex weights
//! `ρ(x)`: a finite mixture of point atoms and uniform segments supported on
//! `[0, M]`, with total mass 1 and `P(ρ > 0) > 0`. Restricting to this family
//! keeps every expectation either exact (atoms) or cheaply integrable
//! (segments, via adaptive Gauss–Legendre quadrature).
//!
//! The [`Environment`] realizes one sample `ω` of the weight field lazily: the
//! weight of a vertex is a pure function of `(environment seed, vertex)`,
//! computed by feeding a collision-resistant 128-bit mix of the seed, the
//! dimension, and the sparse coordinates into the law's inverse transform.
//! Revisiting a vertex — within one replica or across coupled processes —
//! always sees the same weight, and the lattice never has to be materialized.

use crate::lattice::Vertex;
use crate::quad;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the "total mass equals one" validation check.
pub const MASS_TOL: f64 = 1e-12;
/// Absolute error target for expectations with segment pieces.
pub const EXPECT_TOL: f64 = 1e-11;

/// Errors from weight-law validation, integration, and the environment oracle.
#[derive(Debug, Error)]
pub enum WeightError {
    /// The law lists no atoms and no segments.
    #[error("weight law is empty: no atoms and no segments")]
    EmptyLaw,
    /// Total probability mass differs from 1 by more than [`MASS_TOL`].
    #[error("weight law mass is {0}, expected 1")]
    NonNormalized(f64),
    /// A support point is negative (or not finite).
    #[error("weight law support point {0} is outside [0, ∞)")]
    NegativeSupport(f64),
    /// A probability is negative, above 1, or not finite.
    #[error("weight law probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    /// A segment is inverted or degenerate.
    #[error("weight segment [{lo}, {hi}] is empty or inverted")]
    BadSegment { lo: f64, hi: f64 },
    /// Every unit of mass sits on the atom at zero, so `P(ρ > 0) = 0`.
    #[error("all probability mass sits at zero; the law must satisfy P(ρ > 0) > 0")]
    AllMassAtZero,
    /// A vertex uses a coordinate axis outside the environment's dimension.
    #[error("vertex touches axis {axis} but the environment has dimension {dimension}")]
    DimensionMismatch { dimension: u32, axis: u32 },
    /// Adaptive quadrature ran out of budget inside [`WeightSpec::expect`].
    #[error("expectation quadrature failed: {0}")]
    QuadratureNonConvergence(#[from] quad::QuadError),
}

/// Unvalidated weight-law description, exactly as written in config files:
/// `weights = { atoms = [[value, prob], ...], segments = [[lo, hi, prob], ...] }`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawWeightLaw {
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
    #[serde(default)]
    pub segments: Vec<(f64, f64, f64)>,
}

/// A validated law for the vertex weight `ρ`.
///
/// Invariants (enforced by [`WeightSpec::validate`], preserved by
/// immutability): masses sum to 1 within [`MASS_TOL`]; all support lies in
/// `[0, bound_m]` with `bound_m` equal to the largest support point; and the
/// mass on `(0, bound_m]` is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSpec {
    atoms: Vec<(f64, f64)>,
    segments: Vec<(f64, f64, f64)>,
    bound_m: f64,
}

impl WeightSpec {
    /// Validate a raw law into a normalized spec.
    ///
    /// Zero-probability pieces are dropped, atoms and segments are sorted, and
    /// the essential supremum `bound_m` is computed from the retained support.
    pub fn validate(raw: &RawWeightLaw) -> Result<Self, WeightError> {
        if raw.atoms.is_empty() && raw.segments.is_empty() {
            return Err(WeightError::EmptyLaw);
        }
        let mut mass = 0.0;
        let mut atoms = Vec::new();
        for &(value, prob) in &raw.atoms {
            if !value.is_finite() || value < 0.0 {
                return Err(WeightError::NegativeSupport(value));
            }
            if !prob.is_finite() || !(0.0..=1.0 + MASS_TOL).contains(&prob) {
                return Err(WeightError::InvalidProbability(prob));
            }
            mass += prob;
            if prob > 0.0 {
                atoms.push((value, prob));
            }
        }
        let mut segments = Vec::new();
        for &(lo, hi, prob) in &raw.segments {
            if !lo.is_finite() || lo < 0.0 {
                return Err(WeightError::NegativeSupport(lo));
            }
            if !hi.is_finite() || hi <= lo {
                return Err(WeightError::BadSegment { lo, hi });
            }
            if !prob.is_finite() || !(0.0..=1.0 + MASS_TOL).contains(&prob) {
                return Err(WeightError::InvalidProbability(prob));
            }
            mass += prob;
            if prob > 0.0 {
                segments.push((lo, hi, prob));
            }
        }
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(WeightError::NonNormalized(mass));
        }
        let bound_m = atoms
            .iter()
            .map(|&(v, _)| v)
            .chain(segments.iter().map(|&(_, hi, _)| hi))
            .fold(0.0_f64, f64::max);
        if bound_m <= 0.0 {
            return Err(WeightError::AllMassAtZero);
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        segments.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(WeightSpec {
            atoms,
            segments,
            bound_m,
        })
    }

    /// The degenerate law `ρ ≡ value` (requires `value > 0`).
    pub fn constant(value: f64) -> Result<Self, WeightError> {
        Self::validate(&RawWeightLaw {
            atoms: vec![(value, 1.0)],
            segments: vec![],
        })
    }

    /// A pure-atom law from `(value, probability)` pairs.
    pub fn from_atoms(atoms: &[(f64, f64)]) -> Result<Self, WeightError> {
        Self::validate(&RawWeightLaw {
            atoms: atoms.to_vec(),
            segments: vec![],
        })
    }

    /// The uniform law on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64) -> Result<Self, WeightError> {
        Self::validate(&RawWeightLaw {
            atoms: vec![],
            segments: vec![(lo, hi, 1.0)],
        })
    }

    /// Retained atoms, sorted by value.
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Retained segments, sorted by lower endpoint.
    pub fn segments(&self) -> &[(f64, f64, f64)] {
        &self.segments
    }

    /// Essential supremum `M` of the law.
    pub fn bound_m(&self) -> f64 {
        self.bound_m
    }

    /// `Some(c)` when the law is a single atom `ρ ≡ c`.
    pub fn as_constant(&self) -> Option<f64> {
        match (self.atoms.as_slice(), self.segments.as_slice()) {
            ([(v, _)], []) => Some(*v),
            _ => None,
        }
    }

    /// `Some(ε)` when the law puts no mass on `(0, ε)`, i.e. it satisfies
    /// `P(ρ = 0 or ρ ∈ [ε, M]) = 1` with the largest such `ε`. Laws whose
    /// continuous part reaches down to 0 have no gap and return `None`.
    pub fn eps_gap(&self) -> Option<f64> {
        let mut eps = f64::INFINITY;
        for &(v, _) in &self.atoms {
            if v > 0.0 {
                eps = eps.min(v);
            }
        }
        for &(lo, _, _) in &self.segments {
            if lo == 0.0 {
                return None;
            }
            eps = eps.min(lo);
        }
        eps.is_finite().then_some(eps)
    }

    /// `E f(ρ)`: exact sums over atoms plus adaptive Gauss–Legendre over each
    /// segment, to absolute error [`EXPECT_TOL`] for smooth `f`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64, WeightError> {
        let mut acc = 0.0;
        for &(v, p) in &self.atoms {
            acc += p * f(v);
        }
        if !self.segments.is_empty() {
            let piece_tol = EXPECT_TOL / self.segments.len() as f64;
            for &(lo, hi, p) in &self.segments {
                let density = p / (hi - lo);
                acc += density * quad::adaptive_legendre(&f, lo, hi, piece_tol / density)?;
            }
        }
        Ok(acc)
    }

    /// `E ρ`.
    pub fn mean(&self) -> f64 {
        self.expect(|r| r)
            .expect("polynomial expectation cannot fail")
    }

    /// `E ρ²`.
    pub fn second_moment(&self) -> f64 {
        self.expect(|r| r * r)
            .expect("polynomial expectation cannot fail")
    }

    /// Inverse transform: map two uniforms in `[0, 1)` to a draw. The first
    /// picks the mixture piece, the second the position within a segment.
    fn pick(&self, u_piece: f64, u_pos: f64) -> f64 {
        let mut rest = u_piece;
        for &(v, p) in &self.atoms {
            if rest < p {
                return v;
            }
            rest -= p;
        }
        for &(lo, hi, p) in &self.segments {
            if rest < p {
                return lo + (hi - lo) * u_pos;
            }
            rest -= p;
        }
        // Roundoff in the cumulative walk: attribute leftovers to the last piece.
        match (self.segments.last(), self.atoms.last()) {
            (Some(&(lo, hi, _)), _) => lo + (hi - lo) * u_pos,
            (None, Some(&(v, _))) => v,
            (None, None) => unreachable!("validated law has at least one piece"),
        }
    }

    /// One draw from the law. Always consumes exactly two uniforms, so the
    /// stream position after a draw does not depend on which piece was hit.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u_piece: f64 = rand::RngExt::random(rng);
        let u_pos: f64 = rand::RngExt::random(rng);
        self.pick(u_piece, u_pos)
    }
}

/// SplitMix64 finalizer: a fast 64-bit mixing permutation with good avalanche.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Top 53 bits of a mixed word as a uniform in `[0, 1)`.
#[inline]
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Deterministic quenched weight oracle: one realization `ω` of the weight
/// field, addressed by vertex.
///
/// `vertex_weight` is a pure function of `(seed, dimension, vertex)`; the
/// weights of distinct vertices behave statistically like i.i.d. draws from
/// the spec. Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct Environment {
    seed: u64,
    dimension: u32,
    spec: WeightSpec,
}

impl Environment {
    pub fn new(seed: u64, spec: WeightSpec, dimension: u32) -> Self {
        Environment {
            seed,
            dimension,
            spec,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dimension(&self) -> u32 {
        self.dimension
    }

    pub fn spec(&self) -> &WeightSpec {
        &self.spec
    }

    /// The weight `ρ(x)` of a vertex under this environment.
    ///
    /// Two 64-bit lanes absorb the seed, the dimension, and each sparse
    /// `(axis, count)` coordinate word through the SplitMix64 permutation; the
    /// lanes then drive the law's two-uniform inverse transform. Repeated
    /// queries agree by construction.
    pub fn vertex_weight(&self, vertex: &Vertex) -> Result<f64, WeightError> {
        if let Some(axis) = vertex.max_axis() {
            if axis >= self.dimension {
                return Err(WeightError::DimensionMismatch {
                    dimension: self.dimension,
                    axis,
                });
            }
        }
        let mut h1 = mix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut h2 = mix64(self.seed ^ 0xd1b5_4a32_d192_ed03);
        h1 = mix64(h1 ^ u64::from(self.dimension));
        h2 = mix64(h2 ^ u64::from(self.dimension).rotate_left(32));
        for &(axis, count) in vertex.sparse() {
            let word = (u64::from(axis) << 32) | u64::from(count);
            h1 = mix64(h1 ^ word);
            h2 = mix64(h2 ^ word.rotate_left(17) ^ 0xa076_1d64_78bd_642f);
        }
        let u_piece = unit(h1 ^ mix64(h2));
        let u_pos = unit(h2 ^ mix64(h1));
        Ok(self.spec.pick(u_piece, u_pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pick_covers_all_pieces() {
        let spec = WeightSpec::validate(&RawWeightLaw {
            atoms: vec![(0.0, 0.25), (2.0, 0.25)],
            segments: vec![(0.5, 1.5, 0.5)],
        })
        .unwrap();
        assert_eq!(spec.pick(0.0, 0.0), 0.0);
        assert_eq!(spec.pick(0.3, 0.0), 2.0);
        assert!((spec.pick(0.6, 0.5) - 1.0).abs() < 1e-12);
        // u_piece at the very top lands in the last piece, not out of range.
        let v = spec.pick(1.0 - 1e-16, 0.25);
        assert!((0.5..=1.5).contains(&v));
    }

    #[test]
    fn mix64_scrambles_sequential_inputs() {
        let a = mix64(1);
        let b = mix64(2);
        assert_ne!(a, b);
        assert!(((a ^ b).count_ones() as i32 - 32).abs() < 20);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        /// Any normalized atom/segment mixture validates, samples inside
        /// its support bound, and has self-consistent moments.
        #[test]
        fn arbitrary_mixtures_sample_within_their_support(
            atoms in proptest::collection::vec((0.0f64..2.5, 0.05f64..1.0), 0..3),
            segments in proptest::collection::vec(
                (0.0f64..1.5, 0.05f64..1.0, 0.05f64..1.0),
                1..3,
            ),
            seed in proptest::prelude::any::<u64>(),
        ) {
            let total: f64 = atoms.iter().map(|a| a.1).sum::<f64>()
                + segments.iter().map(|s| s.2).sum::<f64>();
            let raw = RawWeightLaw {
                atoms: atoms.iter().map(|&(v, m)| (v, m / total)).collect(),
                segments: segments
                    .iter()
                    .map(|&(lo, w, m)| (lo, lo + w, m / total))
                    .collect(),
            };
            let spec = WeightSpec::validate(&raw).unwrap();
            let m = spec.bound_m();
            let n = 1_000u32;
            let mut rng = crate::harness::replica_rng(seed, 0);
            let mut sum = 0.0;
            for _ in 0..n {
                let draw = spec.sample(&mut rng);
                proptest::prop_assert!((0.0..=m).contains(&draw));
                sum += draw;
            }
            // A [0, M] variable has variance ≤ M²/4; allow six such sigmas.
            let slack = 6.0 * m / 2.0 / f64::from(n).sqrt();
            proptest::prop_assert!((sum / f64::from(n) - spec.mean()).abs() <= slack);
            proptest::prop_assert!(spec.mean() * spec.mean() <= spec.second_moment() + 1e-12);
            proptest::prop_assert!(spec.second_moment() <= m * m + 1e-12);
            let replay: Vec<f64> = {
                let mut r = crate::harness::replica_rng(seed, 0);
                (0..4).map(|_| spec.sample(&mut r)).collect()
            };
            let again: Vec<f64> = {
                let mut r = crate::harness::replica_rng(seed, 0);
                (0..4).map(|_| spec.sample(&mut r)).collect()
            };
            proptest::prop_assert_eq!(replay, again);
        }
    }
}
