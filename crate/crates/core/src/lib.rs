//! Simulation and verification toolkit for controlled stochastic evolution
//! equations on a spectrally truncated Hilbert space.
//!
//! The crate covers the whole chain needed to check necessary optimality
//! conditions of a candidate control numerically:
//!
//! * [`hilbert`]: diagonal generator, its semigroup and Hilbert–Schmidt pairings;
//! * [`cones`]: adjacent, normal and second-order adjacent cones of control sets;
//! * [`forward`]: problem data, noise ensembles, the mild-solution scheme and the
//!   first/second variational equations;
//! * [`adjoint`]: regression Monte Carlo solvers for the first and second adjoint
//!   backward equations and numerical duality checks;
//! * [`conditions`]: Hamiltonian-based first-order, maximum-principle and
//!   second-order evaluators producing [`conditions::ConditionReport`]s;
//! * [`oracles`]: independent ground truth (Riccati, finite differences,
//!   brute-force cones, analytic LQ adjoints);
//! * [`scenario`]: configuration loading and scenario execution behind the CLI.
//!
//! Path loops run on rayon when the `parallel` feature is enabled (default) and
//! sequentially otherwise; every reduction is performed in path order so that
//! results do not depend on the number of threads. [`run_sequential`] gives the
//! in-order execution at run time.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adjoint;
pub mod cones;
pub mod conditions;
pub mod error;
pub mod forward;
pub mod hilbert;
pub mod oracles;
pub mod regression;
pub mod scenario;

mod par;

pub use error::{Error, Result};
pub use par::run_sequential;
