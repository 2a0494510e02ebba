//! Hamiltonian Monte Carlo with step-size tuning driven by the statistics of
//! the Hamiltonian error.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: phase space, target potentials and exact canonical sampling.
//! - [`integrator`]: leapfrog and fourth-order Yoshida integrators, trajectories,
//!   the reversible Metropolis proposal and the Hamiltonian error.
//! - [`error_stats`]: Monte Carlo moments and cumulants of the Hamiltonian error
//!   over exact canonical draws, scaling fits and the `E[exp(Δ)] = 1` check.
//! - [`tuning`]: the acceptance curve, cost bounds, optimal acceptance targets,
//!   dual averaging and divergence-driven target relaxation.
//! - [`sampler`]: the HMC transition and seeded single/multi chain runners.
//! - [`diagnostics`]: divergence detection, split R-hat and exact-sample R-hat.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod error_stats;
pub mod integrator;
pub mod model;
pub mod normal;
pub mod rng;
pub mod sampler;
pub mod tuning;

pub use error::{Error, Result};
