//! First and second variational equations and the expansion residuals of the
//! state under `ū + εv + ε²h`.

use nalgebra::DVector;

use super::field::{AdaptedField, FieldShape};
use super::noise::NoiseEnsemble;
use super::problem::ProblemSpec;
use super::simulate::{simulate, ControlPolicy, Trajectory};
use crate::par;
use crate::{Error, Result};

fn check_direction(traj: &Trajectory, v: &AdaptedField, what: &'static str) -> Result<()> {
    if v.width() != traj.control.width() {
        return Err(Error::dim(what, traj.control.width(), v.width()));
    }
    v.same_layout(&traj.control)
}

fn assemble(paths: usize, steps: usize, n: usize, per_path: Vec<Vec<f64>>) -> Result<AdaptedField> {
    AdaptedField::from_data(FieldShape::State(n), paths, steps + 1, per_path.concat())
}

/// `dy₁ = (a_x y₁ + a_u v)dt + Σ_j (b_x^j y₁ + b_u^j v)dW_j`, `y₁(0) = 0`,
/// along `(x̄, ū)` with the scheme and noise of the state equation.
pub fn simulate_first_variation(
    spec: &ProblemSpec,
    traj: &Trajectory,
    v: &AdaptedField,
    noise: &NoiseEnsemble,
) -> Result<AdaptedField> {
    check_direction(traj, v, "first variation direction")?;
    let (paths, steps, n, m) = (traj.paths(), traj.steps(), spec.state_dim(), spec.noise_dim);
    let dt = noise.dt();
    let decay = spec.space.semigroup_factors(dt)?;
    let fam = spec.family.as_ref();
    let per_path = par::try_map_indices(paths, |p| {
        let mut ys = Vec::with_capacity((steps + 1) * n);
        let mut y = DVector::zeros(n);
        ys.extend_from_slice(y.as_slice());
        for k in 0..steps {
            let t = noise.time(k);
            let jet = fam.jet1(t, &traj.state.vector(p, k), &traj.control.vector(p, k));
            let vk = v.vector(p, k);
            let dw = noise.increment(p, k);
            let mut inc = (&jet.a_x * &y + &jet.a_u * &vk) * dt;
            for j in 0..m {
                inc += (&jet.b_x[j] * &y + &jet.b_u[j] * &vk) * dw[j];
            }
            y = (y + inc).component_mul(&decay);
            if !y.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite { stage: "first variation", path: p, step: k + 1 });
            }
            ys.extend_from_slice(y.as_slice());
        }
        Ok(ys)
    })?;
    assemble(paths, steps, n, per_path)
}

/// Second variational equation with drift
/// `a_x y₂ + 2a_u h + a_xx(y₁,y₁) + 2a_xu(y₁,v) + a_uu(v,v)` and the analogous
/// diffusion, `y₂(0) = 0`.
pub fn simulate_second_variation(
    spec: &ProblemSpec,
    traj: &Trajectory,
    v: &AdaptedField,
    h: &AdaptedField,
    y1: &AdaptedField,
    noise: &NoiseEnsemble,
) -> Result<AdaptedField> {
    spec.require_second_order()?;
    check_direction(traj, v, "second variation direction")?;
    check_direction(traj, h, "second variation correction")?;
    y1.same_layout(&traj.state)?;
    let (paths, steps, n, m) = (traj.paths(), traj.steps(), spec.state_dim(), spec.noise_dim);
    let dt = noise.dt();
    let decay = spec.space.semigroup_factors(dt)?;
    let fam = spec.family.as_ref();
    let name = fam.name().to_string();
    let per_path = par::try_map_indices(paths, |p| {
        let mut ys = Vec::with_capacity((steps + 1) * n);
        let mut y = DVector::zeros(n);
        ys.extend_from_slice(y.as_slice());
        for k in 0..steps {
            let t = noise.time(k);
            let (xk, uk) = (traj.state.vector(p, k), traj.control.vector(p, k));
            let j1 = fam.jet1(t, &xk, &uk);
            let j2 = fam.jet2(t, &xk, &uk).ok_or_else(|| Error::Capability {
                family: name.clone(),
                what: "second derivatives",
            })?;
            let (vk, hk, y1k) = (v.vector(p, k), h.vector(p, k), y1.vector(p, k));
            let dw = noise.increment(p, k);
            let drift = &j1.a_x * &y + &j1.a_u * &hk * 2.0
                + j2.a_xx.apply(&y1k, &y1k)
                + j2.a_xu.apply(&y1k, &vk) * 2.0
                + j2.a_uu.apply(&vk, &vk);
            let curv = j2.b_xx.apply(&y1k, &y1k) + j2.b_xu.apply(&y1k, &vk) * 2.0 + j2.b_uu.apply(&vk, &vk);
            let mut inc = drift * dt;
            for j in 0..m {
                let col = &j1.b_x[j] * &y + &j1.b_u[j] * &hk * 2.0 + curv.rows(j * n, n);
                inc += col * dw[j];
            }
            y = (y + inc).component_mul(&decay);
            if !y.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite { stage: "second variation", path: p, step: k + 1 });
            }
            ys.extend_from_slice(y.as_slice());
        }
        Ok(ys)
    })?;
    assemble(paths, steps, n, per_path)
}

/// Control field `ū + εv + ε²h`.
pub fn perturbed_control(
    base: &AdaptedField,
    v: &AdaptedField,
    h: Option<&AdaptedField>,
    eps: f64,
) -> Result<AdaptedField> {
    let mut out = base.axpy(eps, v)?;
    if let Some(h) = h {
        out = out.axpy(eps * eps, h)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionRow {
    pub eps: f64,
    /// `sup_k ‖(δx/ε − y₁)(t_k)‖_{L²(Ω)}`.
    pub r1: f64,
    /// `sup_k ‖((δx − εy₁)/ε² − ½y₂)(t_k)‖_{L²(Ω)}`.
    pub r2: f64,
    /// Rounding floors of the two quotients at this ε.
    pub floor_r1: f64,
    pub floor_r2: f64,
}

/// Relative size of one rounding error in a simulated state, times a safety
/// factor for its accumulation over the steps.
const ROUNDING: f64 = 1e3 * f64::EPSILON;

/// Expansion residuals along a decreasing ε-ladder, all on the noise of
/// `traj`. The perturbed control need not be admissible.
pub fn expansion_residuals(
    spec: &ProblemSpec,
    traj: &Trajectory,
    v: &AdaptedField,
    h: &AdaptedField,
    eps_ladder: &[f64],
    noise: &NoiseEnsemble,
) -> Result<Vec<ExpansionRow>> {
    if eps_ladder.windows(2).any(|w| !(w[1] < w[0])) || eps_ladder.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidParameter("ε-ladder must be positive and decreasing".into()));
    }
    let y1 = simulate_first_variation(spec, traj, v, noise)?;
    let y2 = simulate_second_variation(spec, traj, v, h, &y1, noise)?;
    let xbar = traj.state.sup_rms();
    let mut rows = Vec::with_capacity(eps_ladder.len());
    for &eps in eps_ladder {
        let control = perturbed_control(&traj.control, v, Some(h), eps)?;
        let xe = simulate(spec, &ControlPolicy::Field(control), noise)?.state;
        let dx = xe.axpy(-1.0, &traj.state)?;
        let r1 = dx.scale(1.0 / eps).axpy(-1.0, &y1)?;
        let r2 = dx.axpy(-eps, &y1)?.scale(1.0 / (eps * eps)).axpy(-0.5, &y2)?;
        rows.push(ExpansionRow {
            eps,
            r1: r1.sup_rms(),
            r2: r2.sup_rms(),
            floor_r1: ROUNDING * xbar / eps,
            floor_r2: ROUNDING * xbar / (eps * eps),
        });
    }
    Ok(rows)
}

/// Halving test on a residual column: each value must be at most `ratio`
/// times the previous one unless it is already within `3×floor`. Returns
/// whether the column passes and the largest ratio that was tested.
pub fn halving_check(values: &[f64], floors: &[f64], ratio: f64) -> (bool, f64) {
    let mut ok = true;
    let mut worst = 0.0f64;
    for i in 1..values.len() {
        if values[i - 1] <= 3.0 * floors[i - 1] || values[i] <= 3.0 * floors[i] {
            continue;
        }
        let r = values[i] / values[i - 1];
        worst = worst.max(r);
        ok &= r <= ratio;
    }
    (ok, worst)
}
