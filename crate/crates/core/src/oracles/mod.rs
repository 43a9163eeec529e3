//! Independent reference computations for the test suite and the acceptance
//! runs. Nothing here calls into `adjoint`, `conditions` or `cones`; the
//! arithmetic is duplicated on purpose so that agreement is evidence.

pub mod cones_bf;
pub mod finite_diff;
pub mod lq_adjoint;
pub mod riccati;

pub use cones_bf::{brute_force_cone, exact_projection, extrapolate, ConeRow};
pub use finite_diff::{finite_diff_expansion, second_difference, ExpansionQuotients};
pub use lq_adjoint::analytic_first_adjoint_lq;
pub use riccati::{discrete_riccati, lyapunov_second_adjoint, riccati_solve, LqData, RiccatiKind, RiccatiSolution};
