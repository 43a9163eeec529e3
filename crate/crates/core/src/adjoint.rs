//! Backward solvers for the first and second adjoint equations and numerical
//! checks of their duality identities.
//!
//! Both recursions are the exact discrete duals of the exponential-Euler
//! scheme. With `Y_k = E_k[S p_{k+1}]` and `Z_k = E_k[S p_{k+1} ΔW_kᵀ]/Δt`,
//!
//! ```text
//! p_N = −g_x(x̄_N),   p_k = Y_k + Δt (a_xᵀ Y_k + Σ_j b_x^{jᵀ} Z_k^j − f_x),
//! ```
//!
//! so that `−E Σ Δt ⟨𝕳_u(Y, Z), δu⟩` is the derivative of the discrete cost.
//! `P₁` is stored as `p`, `Q₁` as `Z`, and `Y` is kept as the propagated
//! costate at which the Hamiltonian is evaluated. The second adjoint uses
//! `Π_k = E_k[S P₂_{k+1} S]`, `Q₂^j = E_k[S P₂_{k+1} S ΔW_j]/Δt` and
//!
//! ```text
//! P₂_k = LᵀΠL + Δt Σ_j (LᵀQ₂^jB_j + B_jᵀQ₂^jL + B_jᵀΠB_j) + Δt 𝕳_xx,
//! ```
//!
//! with `L = I + Δt a_x`, `B_j = b_x^j`. Conditional expectations come from a
//! joint regression on `φ(x_k) ⊗ (1, ΔW_k/√Δt)`.

use nalgebra::{DMatrix, DVector};

use crate::forward::{AdaptedField, Estimate, FieldShape, GaussianStream, Jet1, Jet2, NoiseEnsemble, ProblemSpec, Trajectory};
use crate::par;
use crate::regression::{regress_blocks, Fit, RegressionConfig, RegressionDiagnostics};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FirstAdjoint {
    /// `P₁` at steps `0..=N`.
    pub p1: AdaptedField,
    /// `Q₁` as `n × m` arrays at steps `0..N`.
    pub q1: AdaptedField,
    /// `E_k[S(Δt) P₁_{k+1}]` at steps `0..N`.
    pub p1_prop: AdaptedField,
    pub diagnostics: Vec<RegressionDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondAdjoint {
    /// `P₂` at steps `0..=N`.
    pub p2: AdaptedField,
    /// `E_k[S P₂_{k+1} S]` at steps `0..N`.
    pub p2_prop: AdaptedField,
    /// `[Q₂^1 | … | Q₂^m]`, an `n × n·m` array at steps `0..N`.
    pub q2: AdaptedField,
    /// Largest relative asymmetry of `P₂_k` before symmetrization.
    pub max_asymmetry: f64,
    pub diagnostics: Vec<RegressionDiagnostics>,
}

impl FirstAdjoint {
    pub fn y(&self, p: usize, k: usize) -> DVector<f64> {
        self.p1_prop.vector(p, k)
    }

    pub fn z(&self, p: usize, k: usize) -> DMatrix<f64> {
        self.q1.matrix(p, k)
    }
}

impl SecondAdjoint {
    pub fn pi(&self, p: usize, k: usize) -> DMatrix<f64> {
        self.p2_prop.matrix(p, k)
    }

    pub fn q2_channel(&self, p: usize, k: usize, j: usize) -> DMatrix<f64> {
        let n = self.p2.shape().width();
        let n = (n as f64).sqrt() as usize;
        let all = self.q2.get(p, k);
        DMatrix::from_column_slice(n, n, &all[j * n * n..(j + 1) * n * n])
    }

    fn channels(&self) -> usize {
        match self.q2.shape() {
            FieldShape::Array(r, c) => c / r,
            _ => 0,
        }
    }
}

fn noise_weights(noise: &NoiseEnsemble, k: usize) -> impl Fn(usize, &mut [f64]) + Sync + Send + '_ {
    let inv = 1.0 / noise.dt().sqrt();
    move |p, w| {
        w[0] = 1.0;
        for (wj, dw) in w[1..].iter_mut().zip(noise.increment(p, k)) {
            *wj = dw * inv;
        }
    }
}

/// Conditional mean and martingale coefficients at `x`.
fn split(fit: &Fit, x: &[f64], dt: f64) -> (DVector<f64>, Vec<DVector<f64>>) {
    let mut blocks = fit.predict_blocks(x);
    let scale = 1.0 / dt.sqrt();
    let mean = blocks.remove(0);
    (mean, blocks.into_iter().map(|b| b * scale).collect())
}

fn check_inputs(spec: &ProblemSpec, traj: &Trajectory, noise: &NoiseEnsemble) -> Result<()> {
    if traj.paths() != noise.paths() {
        return Err(Error::dim("trajectory paths", noise.paths(), traj.paths()));
    }
    if traj.steps() != noise.steps() {
        return Err(Error::dim("trajectory steps", noise.steps(), traj.steps()));
    }
    if traj.state.width() != spec.state_dim() {
        return Err(Error::dim("trajectory state", spec.state_dim(), traj.state.width()));
    }
    Ok(())
}

/// `a_xᵀ Y + Σ_j b_x^{jᵀ} Z_j − f_x`.
pub(crate) fn adjoint_drift(jet: &Jet1, y: &DVector<f64>, z: &DMatrix<f64>) -> DVector<f64> {
    let mut g = jet.a_x.tr_mul(y) - &jet.f_x;
    for (j, bx) in jet.b_x.iter().enumerate() {
        g += bx.tr_mul(&z.column(j));
    }
    g
}

/// `𝕳_xx` at `(Y, Z)`, symmetrized.
pub(crate) fn hamiltonian_xx(jet: &Jet2, y: &DVector<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let zvec = DVector::from_column_slice(z.as_slice());
    let h = jet.a_xx.contract(y) + jet.b_xx.contract(&zvec) - &jet.f_xx;
    (&h + h.transpose()) * 0.5
}

/// `𝕳_xu` (`n × d`) at `(Y, Z)`.
pub(crate) fn hamiltonian_xu(jet: &Jet2, y: &DVector<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let zvec = DVector::from_column_slice(z.as_slice());
    jet.a_xu.contract(y) + jet.b_xu.contract(&zvec) - &jet.f_xu
}

/// `𝕳_uu` (`d × d`) at `(Y, Z)`, symmetrized.
pub(crate) fn hamiltonian_uu(jet: &Jet2, y: &DVector<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let zvec = DVector::from_column_slice(z.as_slice());
    let h = jet.a_uu.contract(y) + jet.b_uu.contract(&zvec) - &jet.f_uu;
    (&h + h.transpose()) * 0.5
}

pub fn solve_first_adjoint(
    spec: &ProblemSpec,
    traj: &Trajectory,
    noise: &NoiseEnsemble,
    cfg: &RegressionConfig,
) -> Result<FirstAdjoint> {
    cfg.validate()?;
    check_inputs(spec, traj, noise)?;
    let (paths, steps, n, m) = (traj.paths(), traj.steps(), spec.state_dim(), spec.noise_dim);
    let dt = noise.dt();
    let s = spec.space.semigroup_factors(dt)?;
    let fam = spec.family.as_ref();

    let mut p1 = AdaptedField::zeros(FieldShape::State(n), paths, steps + 1);
    let mut q1 = AdaptedField::zeros(FieldShape::Array(n, m), paths, steps);
    let mut prop = AdaptedField::zeros(FieldShape::State(n), paths, steps);
    for p in 0..paths {
        let gx = fam.terminal_gradient(&traj.state.vector(p, steps));
        p1.set(p, steps, (-gx).as_slice());
    }
    let mut diagnostics = Vec::with_capacity(steps);

    for k in (0..steps).rev() {
        let next = &p1;
        let (fit, diag) = regress_blocks(&traj.state, k, 1 + m, noise_weights(noise, k), n, cfg, |p, out| {
            for ((o, v), si) in out.iter_mut().zip(next.get(p, k + 1)).zip(s.iter()) {
                *o = v * si;
            }
        })?;
        diagnostics.push(diag);
        let t = noise.time(k);
        let rows = par::try_map_indices(paths, |p| {
            let x = traj.state.vector(p, k);
            let (y, zs) = split(&fit, x.as_slice(), dt);
            let mut z = DMatrix::zeros(n, m);
            for (j, zj) in zs.iter().enumerate() {
                z.set_column(j, zj);
            }
            let jet = fam.jet1(t, &x, &traj.control.vector(p, k));
            let pk = &y + adjoint_drift(&jet, &y, &z) * dt;
            if !pk.iter().chain(z.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { stage: "first adjoint", path: p, step: k });
            }
            Ok((pk, y, z))
        })?;
        for (p, (pk, y, z)) in rows.into_iter().enumerate() {
            p1.set(p, k, pk.as_slice());
            prop.set(p, k, y.as_slice());
            q1.set(p, k, z.as_slice());
        }
    }
    diagnostics.reverse();
    Ok(FirstAdjoint {
        p1,
        q1,
        p1_prop: prop,
        diagnostics,
    })
}

fn upper_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn unpack_sym(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            out[(i, j)] = v[idx];
            out[(j, i)] = v[idx];
            idx += 1;
        }
    }
    out
}

pub fn solve_second_adjoint(
    spec: &ProblemSpec,
    traj: &Trajectory,
    first: &FirstAdjoint,
    noise: &NoiseEnsemble,
    cfg: &RegressionConfig,
) -> Result<SecondAdjoint> {
    cfg.validate()?;
    spec.require_second_order()?;
    check_inputs(spec, traj, noise)?;
    first.p1.same_layout(&AdaptedField::zeros(FieldShape::State(spec.state_dim()), traj.paths(), traj.steps() + 1))?;
    let (paths, steps, n, m) = (traj.paths(), traj.steps(), spec.state_dim(), spec.noise_dim);
    let dt = noise.dt();
    let s = spec.space.semigroup_factors(dt)?;
    let fam = spec.family.as_ref();
    let name = fam.name().to_string();

    let mut p2 = AdaptedField::zeros(FieldShape::Array(n, n), paths, steps + 1);
    let mut prop = AdaptedField::zeros(FieldShape::Array(n, n), paths, steps);
    let mut q2 = AdaptedField::zeros(FieldShape::Array(n, n * m), paths, steps);
    for p in 0..paths {
        let g = fam
            .terminal_hessian(&traj.state.vector(p, steps))
            .ok_or_else(|| Error::Capability { family: name.clone(), what: "terminal Hessian" })?;
        let g = (&g + g.transpose()) * -0.5;
        p2.set(p, steps, g.as_slice());
    }
    let mut diagnostics = Vec::with_capacity(steps);
    let mut max_asymmetry = 0.0f64;

    for k in (0..steps).rev() {
        let next = &p2;
        let (fit, diag) = regress_blocks(&traj.state, k, 1 + m, noise_weights(noise, k), upper_len(n), cfg, |p, out| {
            let cell = next.get(p, k + 1);
            let mut idx = 0;
            for i in 0..n {
                for j in i..n {
                    out[idx] = s[i] * cell[j * n + i] * s[j];
                    idx += 1;
                }
            }
        })?;
        diagnostics.push(diag);
        let t = noise.time(k);
        let rows = par::try_map_indices(paths, |p| {
            let x = traj.state.vector(p, k);
            let u = traj.control.vector(p, k);
            let (pi, qs) = split(&fit, x.as_slice(), dt);
            let pi = unpack_sym(&pi, n);
            let qs: Vec<DMatrix<f64>> = qs.iter().map(|q| unpack_sym(q, n)).collect();
            let j1 = fam.jet1(t, &x, &u);
            let j2 = fam
                .jet2(t, &x, &u)
                .ok_or_else(|| Error::Capability { family: name.clone(), what: "second derivatives" })?;
            let hxx = hamiltonian_xx(&j2, &first.y(p, k), &first.z(p, k));
            let l = DMatrix::identity(n, n) + &j1.a_x * dt;
            let mut pk = l.transpose() * &pi * &l + hxx * dt;
            for j in 0..m {
                let b = &j1.b_x[j];
                let lqb = l.transpose() * &qs[j] * b;
                pk += (&lqb + lqb.transpose() + b.transpose() * &pi * b) * dt;
            }
            let asym = (&pk - pk.transpose()).amax() / pk.amax().max(f64::MIN_POSITIVE);
            let pk = (&pk + pk.transpose()) * 0.5;
            if !pk.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { stage: "second adjoint", path: p, step: k });
            }
            let mut qcat = DMatrix::zeros(n, n * m);
            for (j, q) in qs.iter().enumerate() {
                qcat.columns_mut(j * n, n).copy_from(q);
            }
            Ok((pk, pi, qcat, asym))
        })?;
        for (p, (pk, pi, qcat, asym)) in rows.into_iter().enumerate() {
            p2.set(p, k, pk.as_slice());
            prop.set(p, k, pi.as_slice());
            q2.set(p, k, qcat.as_slice());
            max_asymmetry = max_asymmetry.max(asym);
        }
    }
    diagnostics.reverse();
    Ok(SecondAdjoint {
        p2,
        p2_prop: prop,
        q2,
        max_asymmetry,
        diagnostics,
    })
}

/// Columnwise contraction `(Q₂^j x)_j` at one cell.
pub fn q2_action_at(adj2: &SecondAdjoint, p: usize, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
    let m = adj2.channels();
    let mut out = DMatrix::zeros(x.len(), m);
    for j in 0..m {
        out.set_column(j, &(adj2.q2_channel(p, k, j) * x));
    }
    out
}

/// Columnwise contraction with the transposes, `(Q₂^{jᵀ} x)_j`.
pub fn q2_hat_action_at(adj2: &SecondAdjoint, p: usize, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
    let m = adj2.channels();
    let mut out = DMatrix::zeros(x.len(), m);
    for j in 0..m {
        out.set_column(j, &adj2.q2_channel(p, k, j).tr_mul(x));
    }
    out
}

fn action_field(adj2: &SecondAdjoint, x1: &AdaptedField, hat: bool) -> Result<AdaptedField> {
    let (paths, steps) = (adj2.q2.paths(), adj2.q2.steps());
    let n = match adj2.p2.shape() {
        FieldShape::Array(r, _) => r,
        _ => 0,
    };
    if x1.width() != n {
        return Err(Error::dim("test process state", n, x1.width()));
    }
    if x1.paths() != paths {
        return Err(Error::dim("test process paths", paths, x1.paths()));
    }
    if x1.steps() < steps {
        return Err(Error::dim("test process steps", steps, x1.steps()));
    }
    let m = adj2.channels();
    Ok(AdaptedField::from_fn(FieldShape::Array(n, m), paths, steps, |p, k, out| {
        let x = x1.vector(p, k);
        let a = if hat { q2_hat_action_at(adj2, p, k, &x) } else { q2_action_at(adj2, p, k, &x) };
        out.copy_from_slice(a.as_slice());
    }))
}

/// Finite-dimensional realization of `Q₂^{(t)}(ξ, u, v)`: column `j` at
/// `(p, k)` is `Q₂^j x₁`, where `x₁` is the test process driven by that data.
pub fn realize_q2_action(adj2: &SecondAdjoint, x1: &AdaptedField) -> Result<AdaptedField> {
    action_field(adj2, x1, false)
}

/// Realization of `Q̂₂^{(t)}`, built from `Q₂^{jᵀ}`.
pub fn realize_q2_hat_action(adj2: &SecondAdjoint, x1: &AdaptedField) -> Result<AdaptedField> {
    action_field(adj2, x1, true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialResidual {
    pub start_step: usize,
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Path estimate of `LHS − RHS`.
    pub difference: Estimate,
    /// `|LHS − RHS| / (|LHS| + |RHS| + 1)`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityStats {
    pub trials: Vec<TrialResidual>,
    pub max_normalized: f64,
    pub mean_normalized: f64,
}

impl IdentityStats {
    fn from_trials(trials: Vec<TrialResidual>) -> Self {
        let max_normalized = trials.iter().map(|t| t.normalized).fold(0.0, f64::max);
        let mean_normalized = if trials.is_empty() {
            0.0
        } else {
            trials.iter().map(|t| t.normalized).sum::<f64>() / trials.len() as f64
        };
        Self {
            trials,
            max_normalized,
            mean_normalized,
        }
    }
}

fn trial_residual(start_step: usize, lhs: &[f64], rhs: &[f64]) -> TrialResidual {
    let diff: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
    let (l, r) = (Estimate::from_samples(lhs), Estimate::from_samples(rhs));
    TrialResidual {
        start_step,
        lhs: l,
        rhs: r,
        difference: Estimate::from_samples(&diff),
        normalized: (l.mean - r.mean).abs() / (l.mean.abs() + r.mean.abs() + 1.0),
    }
}

/// Random data for the duality checks.
///
/// The start step is uniform on the grid. Initial values are
/// `η = η₀ + Γ x̄(t)` with Gaussian `η₀` and `Γ` (entries of variance
/// `1/(4n)`), so they are `𝓕_t`-measurable. Forcing fields are piecewise
/// constant on the grid with Gaussian values, scaled so that
/// `Σ_{k≥t} Δt |ψ_k|² = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityData {
    pub start_step: usize,
    pub eta0: DVector<f64>,
    pub gamma: DMatrix<f64>,
    /// Drift forcing, steps `start..N`.
    pub drift: Vec<DVector<f64>>,
    /// Diffusion forcing (`n × m`), steps `start..N`.
    pub diffusion: Vec<DMatrix<f64>>,
}

impl IdentityData {
    pub fn draw(rng: &mut GaussianStream, n: usize, m: usize, steps: usize, dt: f64) -> Self {
        let start_step = rng.index(steps);
        Self::draw_from(rng, start_step, n, m, steps, dt)
    }

    pub fn draw_from(rng: &mut GaussianStream, start_step: usize, n: usize, m: usize, steps: usize, dt: f64) -> Self {
        let eta0 = DVector::from_fn(n, |_, _| rng.normal());
        let gscale = 0.5 / (n as f64).sqrt();
        let gamma = DMatrix::from_fn(n, n, |_, _| gscale * rng.normal());
        let len = steps - start_step;
        let mut drift: Vec<DVector<f64>> = (0..len).map(|_| DVector::from_fn(n, |_, _| rng.normal())).collect();
        let mut diffusion: Vec<DMatrix<f64>> = (0..len).map(|_| DMatrix::from_fn(n, m, |_, _| rng.normal())).collect();
        let nd = (dt * drift.iter().map(|v| v.norm_squared()).sum::<f64>()).sqrt();
        let nq = (dt * diffusion.iter().map(|v| v.norm_squared()).sum::<f64>()).sqrt();
        drift.iter_mut().for_each(|v| *v /= nd);
        diffusion.iter_mut().for_each(|v| *v /= nq);
        Self {
            start_step,
            eta0,
            gamma,
            drift,
            diffusion,
        }
    }

    pub fn zero(start_step: usize, n: usize, m: usize, steps: usize) -> Self {
        Self {
            start_step,
            eta0: DVector::zeros(n),
            gamma: DMatrix::zeros(n, n),
            drift: vec![DVector::zeros(n); steps - start_step],
            diffusion: vec![DMatrix::zeros(n, m); steps - start_step],
        }
    }

    pub fn initial(&self, xbar: &DVector<f64>) -> DVector<f64> {
        &self.eta0 + &self.gamma * xbar
    }
}

fn check_identity_shapes(spec: &ProblemSpec, data: &IdentityData, steps: usize) -> Result<()> {
    let (n, m) = (spec.state_dim(), spec.noise_dim);
    if data.start_step >= steps || data.drift.len() != steps - data.start_step || data.diffusion.len() != data.drift.len() {
        return Err(Error::InvalidParameter("identity data does not match the grid".into()));
    }
    if data.eta0.len() != n || data.drift.iter().any(|v| v.len() != n) || data.diffusion.iter().any(|q| q.shape() != (n, m)) {
        return Err(Error::dim("identity data state", n, data.eta0.len()));
    }
    Ok(())
}

/// Both sides of
/// `E⟨z(T), −g_x⟩ + E Σ Δt ⟨z, a_xᵀP₁ + b_xᵀQ₁ − f_x⟩ = E⟨η, P₁(t)⟩ + E Σ Δt (⟨ψ₁, P₁⟩ + ⟨ψ₂, Q₁⟩)`
/// for one data draw, with `z` driven by the ensemble noise and the costate
/// pairings taken at the propagated value `Y`.
pub fn transposition_trial(
    spec: &ProblemSpec,
    traj: &Trajectory,
    adj: &FirstAdjoint,
    noise: &NoiseEnsemble,
    data: &IdentityData,
) -> Result<TrialResidual> {
    check_inputs(spec, traj, noise)?;
    let steps = traj.steps();
    check_identity_shapes(spec, data, steps)?;
    let dt = noise.dt();
    let s = spec.space.semigroup_factors(dt)?;
    let fam = spec.family.as_ref();
    let t0 = data.start_step;
    let sides = par::map_indices(traj.paths(), |p| {
        let eta = data.initial(&traj.state.vector(p, t0));
        let mut z = eta.clone();
        let (mut lhs, mut rhs) = (0.0, eta.dot(&adj.p1.vector(p, t0)));
        for k in t0..steps {
            let i = k - t0;
            let x = traj.state.vector(p, k);
            let jet = fam.jet1(noise.time(k), &x, &traj.control.vector(p, k));
            let (y, zq) = (adj.y(p, k), adj.z(p, k));
            lhs += dt * z.dot(&adjoint_drift(&jet, &y, &zq));
            rhs += dt * (data.drift[i].dot(&y) + crate::hilbert::frobenius(&data.diffusion[i], &zq));
            let dw = DVector::from_column_slice(noise.increment(p, k));
            z = (z + &data.drift[i] * dt + &data.diffusion[i] * dw).component_mul(&s);
        }
        lhs -= z.dot(&fam.terminal_gradient(&traj.state.vector(p, steps)));
        (lhs, rhs)
    });
    let (l, r): (Vec<f64>, Vec<f64>) = sides.into_iter().unzip();
    Ok(trial_residual(t0, &l, &r))
}

pub fn check_transposition_identity(
    spec: &ProblemSpec,
    traj: &Trajectory,
    adj: &FirstAdjoint,
    noise: &NoiseEnsemble,
    trials: usize,
    seed: u64,
) -> Result<IdentityStats> {
    let mut rng = GaussianStream::new(seed, 1);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let data = IdentityData::draw(&mut rng, spec.state_dim(), spec.noise_dim, traj.steps(), noise.dt());
        out.push(transposition_trial(spec, traj, adj, noise, &data)?);
    }
    Ok(IdentityStats::from_trials(out))
}

/// Both sides of the relaxed duality identity for one pair of test processes
/// `x₁, x₂` started at the same step.
///
/// The left side is `E⟨−g_xx x₁(T), x₂(T)⟩ + E Σ Δt ⟨𝕳_xx x₁, x₂⟩`. The right
/// side pairs `Π`, `Q₂` with the data as in the continuous identity, using the
/// drift predictor `x̂ = (I + Δt a_x)x + Δt u` inside the martingale terms, plus
/// the `O(Δt)` products `Δt Σ_j (⟨Q₂^j b_x^j x₂, u₁⟩ + ⟨Q₂^j b_x^j x₁, u₂⟩)` that
/// the grid adds.
pub fn relaxed_transposition_trial(
    spec: &ProblemSpec,
    traj: &Trajectory,
    first: &FirstAdjoint,
    adj2: &SecondAdjoint,
    noise: &NoiseEnsemble,
    d1: &IdentityData,
    d2: &IdentityData,
) -> Result<TrialResidual> {
    spec.require_second_order()?;
    check_inputs(spec, traj, noise)?;
    let steps = traj.steps();
    check_identity_shapes(spec, d1, steps)?;
    check_identity_shapes(spec, d2, steps)?;
    if d1.start_step != d2.start_step {
        return Err(Error::InvalidParameter("relaxed identity data must share the start step".into()));
    }
    let (n, m) = (spec.state_dim(), spec.noise_dim);
    let dt = noise.dt();
    let s = spec.space.semigroup_factors(dt)?;
    let fam = spec.family.as_ref();
    let t0 = d1.start_step;
    let sides = par::try_map_indices(traj.paths(), |p| {
        let xt = traj.state.vector(p, t0);
        let (mut x1, mut x2) = (d1.initial(&xt), d2.initial(&xt));
        let mut lhs = 0.0;
        let mut rhs = x1.dot(&(adj2.p2.matrix(p, t0) * &x2));
        for k in t0..steps {
            let i = k - t0;
            let (x, u) = (traj.state.vector(p, k), traj.control.vector(p, k));
            let t = noise.time(k);
            let j1 = fam.jet1(t, &x, &u);
            let j2 = fam.jet2(t, &x, &u).ok_or_else(|| Error::Capability {
                family: fam.name().to_string(),
                what: "second derivatives",
            })?;
            let hxx = hamiltonian_xx(&j2, &first.y(p, k), &first.z(p, k));
            lhs += dt * x1.dot(&(&hxx * &x2));

            let pi = adj2.pi(p, k);
            let l = DMatrix::identity(n, n) + &j1.a_x * dt;
            let (u1, u2) = (&d1.drift[i], &d2.drift[i]);
            let (v1, v2) = (&d1.diffusion[i], &d2.diffusion[i]);
            let lx1 = &l * &x1;
            let xh1 = &lx1 + u1 * dt;
            let xh2 = &l * &x2 + u2 * dt;
            let q_x1 = q2_action_at(adj2, p, k, &xh1);
            let qhat_x2 = q2_hat_action_at(adj2, p, k, &xh2);
            let mut step = (&pi * u1).dot(&xh2) + (&pi * &lx1).dot(u2);
            let mut grid = 0.0;
            for j in 0..m {
                let b = &j1.b_x[j];
                let (v1j, v2j) = (v1.column(j), v2.column(j));
                step += (&pi * (b * &x1)).dot(&v2j);
                step += (&pi * v1j).dot(&(b * &x2 + v2j));
                let qj = adj2.q2_channel(p, k, j);
                grid += (&qj * (b * &x2)).dot(u1) + (&qj * (b * &x1)).dot(u2);
            }
            step += crate::hilbert::frobenius(v1, &qhat_x2) + crate::hilbert::frobenius(&q_x1, v2);
            rhs += dt * (step + dt * grid);

            let dw = DVector::from_column_slice(noise.increment(p, k));
            let mut n1 = lx1 + u1 * dt + v1 * &dw;
            let mut n2 = &l * &x2 + u2 * dt + v2 * &dw;
            for j in 0..m {
                n1 += &j1.b_x[j] * &x1 * dw[j];
                n2 += &j1.b_x[j] * &x2 * dw[j];
            }
            x1 = n1.component_mul(&s);
            x2 = n2.component_mul(&s);
        }
        let g = fam
            .terminal_hessian(&traj.state.vector(p, steps))
            .ok_or_else(|| Error::Capability { family: fam.name().to_string(), what: "terminal Hessian" })?;
        lhs -= x1.dot(&(g * &x2));
        Ok((lhs, rhs))
    })?;
    let (l, r): (Vec<f64>, Vec<f64>) = sides.into_iter().unzip();
    Ok(trial_residual(t0, &l, &r))
}

pub fn check_relaxed_transposition_identity(
    spec: &ProblemSpec,
    traj: &Trajectory,
    first: &FirstAdjoint,
    adj2: &SecondAdjoint,
    noise: &NoiseEnsemble,
    trials: usize,
    seed: u64,
) -> Result<IdentityStats> {
    let mut rng = GaussianStream::new(seed, 2);
    let (n, m, steps, dt) = (spec.state_dim(), spec.noise_dim, traj.steps(), noise.dt());
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let d1 = IdentityData::draw(&mut rng, n, m, steps, dt);
        let d2 = IdentityData::draw_from(&mut rng, d1.start_step, n, m, steps, dt);
        out.push(relaxed_transposition_trial(spec, traj, first, adj2, noise, &d1, &d2)?);
    }
    Ok(IdentityStats::from_trials(out))
}
