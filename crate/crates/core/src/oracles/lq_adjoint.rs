//! Closed-form first adjoint of the LQ family along a trajectory.
//!
//! Along the optimal feedback the costate is minus the value gradient,
//! `P₁ = −(P x + s)`. For the continuous solution the martingale term follows
//! from Itô's formula, `Q₁^j = −P b_j(x, u)`. For the discrete solution the
//! scheme gives the exact pair `Y = −S(P' S(x + Δt a) + s')`,
//! `Z^j = −S P' S b_j` with `P', s'` taken at the next step.

use nalgebra::{DMatrix, DVector};

use super::riccati::{LqData, RiccatiKind, RiccatiSolution};
use crate::adjoint::FirstAdjoint;
use crate::forward::{AdaptedField, FieldShape, Trajectory};
use crate::{Error, Result};

fn drift(lq: &LqData, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let q = &lq.params;
    &q.f * x + &q.b * u + &q.a0
}

fn diffusion(lq: &LqData, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let q = &lq.params;
    let mut out = q.sigma.clone();
    for j in 0..q.c.len() {
        let col = &q.c[j] * x + &q.d[j] * u;
        let mut target = out.column_mut(j);
        target += col;
    }
    out
}

pub fn analytic_first_adjoint_lq(lq: &LqData, sol: &RiccatiSolution, traj: &Trajectory) -> Result<FirstAdjoint> {
    let (paths, steps) = (traj.paths(), traj.steps());
    if sol.steps() != steps {
        return Err(Error::dim("Riccati grid", steps, sol.steps()));
    }
    let n = lq.lambda.len();
    let m = lq.params.sigma.ncols();
    let sdiag = lq.lambda.map(|l| (l * sol.dt).exp());
    let smat = DMatrix::from_diagonal(&sdiag);
    let p1 = AdaptedField::from_fn(FieldShape::State(n), paths, steps + 1, |p, k, out| {
        let x = traj.state.vector(p, k);
        out.copy_from_slice((-(&sol.p[k] * x + &sol.s[k])).as_slice());
    });
    let (prop, q1) = match sol.kind {
        RiccatiKind::Continuous => {
            let prop = AdaptedField::from_fn(FieldShape::State(n), paths, steps, |p, k, out| {
                out.copy_from_slice(p1.get(p, k));
            });
            let q1 = AdaptedField::from_fn(FieldShape::Array(n, m), paths, steps, |p, k, out| {
                let b = diffusion(lq, &traj.state.vector(p, k), &traj.control.vector(p, k));
                out.copy_from_slice((-(&sol.p[k] * b)).as_slice());
            });
            (prop, q1)
        }
        RiccatiKind::Discrete => {
            let prop = AdaptedField::from_fn(FieldShape::State(n), paths, steps, |p, k, out| {
                let (x, u) = (traj.state.vector(p, k), traj.control.vector(p, k));
                let mean = &smat * (&x + drift(lq, &x, &u) * sol.dt);
                out.copy_from_slice((-(&smat * (&sol.p[k + 1] * mean + &sol.s[k + 1]))).as_slice());
            });
            let q1 = AdaptedField::from_fn(FieldShape::Array(n, m), paths, steps, |p, k, out| {
                let b = diffusion(lq, &traj.state.vector(p, k), &traj.control.vector(p, k));
                out.copy_from_slice((-(&smat * &sol.p[k + 1] * &smat * b)).as_slice());
            });
            (prop, q1)
        }
    };
    Ok(FirstAdjoint {
        p1,
        q1,
        p1_prop: prop,
        diagnostics: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::cones::ControlSet;
    use crate::forward::{simulate, ControlPolicy, LqFamily, LqParams, NoiseEnsemble, ProblemSpec};
    use crate::hilbert::TruncatedSpace;
    use crate::oracles::riccati::{discrete_riccati, riccati_solve};

    fn setup(params: LqParams, x0: f64) -> (LqData, ProblemSpec, NoiseEnsemble) {
        let space = TruncatedSpace::new(vec![-1.0]).unwrap();
        let lq = LqData::new(&space, params.clone()).unwrap();
        let spec = ProblemSpec::new(
            space,
            Arc::new(LqFamily::new(params).unwrap()),
            ControlSet::unconstrained(1),
            1.0,
            DVector::from_element(1, x0),
        )
        .unwrap();
        let noise = NoiseEnsemble::generate(3, 16, 8, 1, 1.0).unwrap();
        (lq, spec, noise)
    }

    #[test]
    fn zero_costs_give_zero_adjoint() {
        let mut p = LqParams::zeros(1, 1, 1);
        p.b = DMatrix::identity(1, 1);
        p.sigma = DMatrix::from_element(1, 1, 0.3);
        let (lq, spec, noise) = setup(p, 1.0);
        let sol = riccati_solve(&lq, 1.0, 8, 8).unwrap();
        let traj = simulate(&spec, &ControlPolicy::Feedback(Arc::new(sol.feedback())), &noise).unwrap();
        let adj = analytic_first_adjoint_lq(&lq, &sol, &traj).unwrap();
        assert!(adj.p1.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_path_gives_zero_adjoint() {
        let mut p = LqParams::zeros(1, 1, 1);
        p.b = DMatrix::identity(1, 1);
        p.m = DMatrix::identity(1, 1);
        p.g = DMatrix::identity(1, 1);
        let (lq, spec, noise) = setup(p, 0.0);
        let sol = discrete_riccati(&lq, 1.0, 8).unwrap();
        let traj = simulate(&spec, &ControlPolicy::Feedback(Arc::new(sol.feedback())), &noise).unwrap();
        let adj = analytic_first_adjoint_lq(&lq, &sol, &traj).unwrap();
        assert!(adj.p1.data().iter().all(|v| *v == 0.0));
        assert!(adj.q1.data().iter().all(|v| *v == 0.0));
    }
}
