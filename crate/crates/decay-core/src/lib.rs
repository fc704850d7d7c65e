//! Monte Carlo toolkit for non-autonomous SDEs: path simulation with tangent
//! flows, pathwise and finite-difference sensitivity estimators, structural
//! assumption checkers (dissipativity, monotonicity, Lyapunov drift),
//! empirical-measure distances, and McKean-Vlasov particle systems with
//! frozen-law auxiliary processes.
//!
//! Everything is deterministic in the experiment seed: noise comes from
//! counter-based per-path streams and reductions use a fixed tree order, so
//! results are bit-identical across worker counts.

pub mod error;
pub mod lyapunov;
pub mod mckean;
pub mod measures;
pub mod models;
pub mod rng;
pub mod sensitivity;
pub mod simulate;
pub mod stats;

pub use error::{DecayError, Result};
