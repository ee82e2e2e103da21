//! Simulation and numerics laboratory for epidemic processes on the oriented
//! lattice `Z₊^d` with i.i.d. random vertex weights.
//!
//! Each vertex `x` of the non-negative lattice carries a random weight `ρ(x)`
//! drawn from a bounded law; infection travels along oriented edges
//! `x → x + e_j` at rate `(λ/d)·ρ(x)·ρ(y)`, while infected vertices recover at
//! rate 1. The crate bundles the simulators and solvers needed to study this
//! model at scale:
//!
//! - [`weights`] — weight laws (atoms plus uniform segments), exact/quadrature
//!   expectations, and a deterministic quenched-environment oracle.
//! - [`meanfield`] — the high-dimensional fixed-point equation for `θ`, the
//!   critical rate `1/E(ρ²)`, and the limiting survival probability.
//! - [`fgrid`] — the finite-`d` extinction-probability profile `F_d(s)` of the
//!   companion branching process, solved by monotone fixed-point iteration.
//! - [`branching`] — Monte Carlo simulation of the weighted branching process
//!   on the oriented `d`-ary tree.
//! - [`lattice`] — the SIR generation construction and the exact
//!   continuous-time contact process on `Z₊^d`.
//! - [`coupling`] — the joint lattice/tree construction that measures how long
//!   the two processes can be kept in bijection, and the SIR-vs-contact
//!   extinction-probability gap.
//! - [`rwalk`] — oriented random-walk collision statistics and the
//!   second-moment survival lower bound built from them.
//! - [`harness`] — configuration, seeded replica scheduling, Wilson intervals,
//!   and CSV/JSON report emission for the `orlat` binary.
//!
//! # Determinism
//!
//! Every Monte Carlo entry point takes a master seed. Replica `i` draws from
//! a dedicated ChaCha stream derived from `(master seed, i)`, and aggregation
//! is order-independent, so results are identical no matter how replicas are
//! scheduled across threads.

pub mod branching;
pub mod coupling;
pub mod fgrid;
pub mod harness;
pub mod lattice;
pub mod meanfield;
pub mod quad;
pub mod rwalk;
pub mod weights;
