use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::field::{AdaptedField, Estimate, FieldShape};
use super::noise::NoiseEnsemble;
use super::problem::ProblemSpec;
use crate::cones::ControlSet;
use crate::par;
use crate::{Error, Result};

/// State feedback `u_k = φ(k, t_k, x_k)`.
pub trait FeedbackLaw: Send + Sync + Debug {
    fn control(&self, step: usize, t: f64, x: &DVector<f64>) -> DVector<f64>;
}

/// `u_k = gains[k]·x + offsets[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFeedback {
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
}

impl FeedbackLaw for AffineFeedback {
    fn control(&self, step: usize, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.gains[step] * x + &self.offsets[step]
    }
}

/// Feedback followed by projection onto a control set.
#[derive(Debug, Clone)]
pub struct ProjectedFeedback {
    pub inner: Arc<dyn FeedbackLaw>,
    pub set: ControlSet,
}

impl FeedbackLaw for ProjectedFeedback {
    fn control(&self, step: usize, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.set.project(&self.inner.control(step, t, x))
    }
}

#[derive(Debug, Clone)]
pub enum ControlPolicy {
    /// Deterministic table, one value per step.
    OpenLoop(Vec<DVector<f64>>),
    /// Per-path control field with `steps` entries.
    Field(AdaptedField),
    Feedback(Arc<dyn FeedbackLaw>),
    /// Base policy plus a constant offset.
    Shifted {
        base: Box<ControlPolicy>,
        offset: DVector<f64>,
    },
}

impl ControlPolicy {
    fn validate(&self, d: usize, paths: usize, steps: usize) -> Result<()> {
        match self {
            ControlPolicy::OpenLoop(table) => {
                if table.len() != steps {
                    return Err(Error::dim("open-loop table length", steps, table.len()));
                }
                if let Some(bad) = table.iter().find(|u| u.len() != d) {
                    return Err(Error::dim("open-loop control", d, bad.len()));
                }
                Ok(())
            }
            ControlPolicy::Field(f) => {
                if f.width() != d {
                    return Err(Error::dim("control field width", d, f.width()));
                }
                if f.paths() != paths {
                    return Err(Error::dim("control field paths", paths, f.paths()));
                }
                if f.steps() != steps {
                    return Err(Error::dim("control field steps", steps, f.steps()));
                }
                Ok(())
            }
            ControlPolicy::Feedback(_) => Ok(()),
            ControlPolicy::Shifted { base, offset } => {
                if offset.len() != d {
                    return Err(Error::dim("control offset", d, offset.len()));
                }
                base.validate(d, paths, steps)
            }
        }
    }

    fn eval(&self, path: usize, step: usize, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ControlPolicy::OpenLoop(table) => table[step].clone(),
            ControlPolicy::Field(f) => f.vector(path, step),
            ControlPolicy::Feedback(law) => law.control(step, t, x),
            ControlPolicy::Shifted { base, offset } => base.eval(path, step, t, x) + offset,
        }
    }
}

/// State at steps `0..=N` and the realized control at steps `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state: AdaptedField,
    pub control: AdaptedField,
}

impl Trajectory {
    pub fn paths(&self) -> usize {
        self.state.paths()
    }

    pub fn steps(&self) -> usize {
        self.control.steps()
    }
}

fn check_noise(spec: &ProblemSpec, noise: &NoiseEnsemble) -> Result<()> {
    if noise.dim() != spec.noise_dim {
        return Err(Error::dim("noise dimension", spec.noise_dim, noise.dim()));
    }
    let t = noise.dt() * noise.steps() as f64;
    if (t - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(Error::InvalidParameter(format!(
            "noise grid ends at {t}, horizon is {}",
            spec.horizon
        )));
    }
    Ok(())
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Exponential Euler: `x_{k+1} = S(Δt)[x_k + a Δt + b ΔW_k]`.
pub fn simulate(spec: &ProblemSpec, policy: &ControlPolicy, noise: &NoiseEnsemble) -> Result<Trajectory> {
    check_noise(spec, noise)?;
    let (paths, steps) = (noise.paths(), noise.steps());
    let (n, d) = (spec.state_dim(), spec.control_dim);
    policy.validate(d, paths, steps)?;
    let dt = noise.dt();
    let decay = spec.space.semigroup_factors(dt)?;
    let fam = spec.family.as_ref();

    let per_path = par::try_map_indices(paths, |p| {
        let mut xs = Vec::with_capacity((steps + 1) * n);
        let mut us = Vec::with_capacity(steps * d);
        let mut x = spec.x0.clone();
        xs.extend_from_slice(x.as_slice());
        for k in 0..steps {
            let t = noise.time(k);
            let u = policy.eval(p, k, t, &x);
            if !finite(u.as_slice()) {
                return Err(Error::NonFinite { stage: "control", path: p, step: k });
            }
            let a = fam.drift(t, &x, &u);
            let b = fam.diffusion(t, &x, &u);
            let dw = DVector::from_column_slice(noise.increment(p, k));
            let next = (&x + a * dt + b * dw).component_mul(&decay);
            if !finite(next.as_slice()) {
                return Err(Error::NonFinite { stage: "state", path: p, step: k + 1 });
            }
            us.extend_from_slice(u.as_slice());
            xs.extend_from_slice(next.as_slice());
            x = next;
        }
        Ok((xs, us))
    })?;

    let mut xdata = Vec::with_capacity(paths * (steps + 1) * n);
    let mut udata = Vec::with_capacity(paths * steps * d);
    for (xs, us) in per_path {
        xdata.extend(xs);
        udata.extend(us);
    }
    Ok(Trajectory {
        state: AdaptedField::from_data(FieldShape::State(n), paths, steps + 1, xdata)?,
        control: AdaptedField::from_data(FieldShape::Control(d), paths, steps, udata)?,
    })
}

/// State field for a given control field.
pub fn simulate_state(spec: &ProblemSpec, control: &AdaptedField, noise: &NoiseEnsemble) -> Result<AdaptedField> {
    Ok(simulate(spec, &ControlPolicy::Field(control.clone()), noise)?.state)
}

/// Per-path `Σ_k f(t_k, x_k, u_k) Δt + g(x_N)`.
pub fn path_costs(spec: &ProblemSpec, traj: &Trajectory, dt: f64) -> Result<Vec<f64>> {
    let fam = spec.family.as_ref();
    let steps = traj.steps();
    par::try_map_indices(traj.paths(), |p| {
        let mut c = 0.0;
        for k in 0..steps {
            c += fam.running_cost(k as f64 * dt, &traj.state.vector(p, k), &traj.control.vector(p, k)) * dt;
        }
        c += fam.terminal_cost(&traj.state.vector(p, steps));
        if c.is_finite() {
            Ok(c)
        } else {
            Err(Error::NonFinite { stage: "cost", path: p, step: steps })
        }
    })
}

pub fn evaluate_cost(spec: &ProblemSpec, policy: &ControlPolicy, noise: &NoiseEnsemble) -> Result<Estimate> {
    let traj = simulate(spec, policy, noise)?;
    Ok(Estimate::from_samples(&path_costs(spec, &traj, noise.dt())?))
}
